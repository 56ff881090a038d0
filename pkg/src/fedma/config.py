"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, unknown keys are rejected.
Every key with its type and default is listed in :data:`KEYS`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .errors import ConfigError

DATASETS = ("mnist", "cifar10", "synth", "synth-images", "text")
MODELS = ("lenet", "mlp", "char-lstm", "small-cnn", "vgg9", "custom")
STRATEGIES = ("fedma", "fedma-comm", "fedavg", "fedprox", "ensemble", "centralized")
PARTITIONS = ("homogeneous", "dirichlet", "bias", "data-efficiency", "roles")


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _opt_int(text):
    return None if text.strip().lower() in ("", "none") else int(text)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: str = ""
    text_path: str = ""
    train_samples: int = 0          # 0 keeps the whole split
    test_samples: int = 0
    synth_classes: int = 4
    synth_dim: int = 20
    synth_size: int = 8
    synth_noise: float = 3.0

    model: str = "lenet"
    hidden: tuple = (100,)
    layers: str = ""                # custom: "conv2d:1:8:3;maxpool:2;dense:1152:10:identity"
    input_shape: tuple = ()
    embed_dim: int = 8
    hidden_size: int = 256
    seq_len: int = 80
    min_points: int = 10_000

    strategy: str = "fedma"
    clients: int = 5
    partition: str = "dirichlet"
    alpha: float = 0.5
    stage: int = 5
    bias_classes: tuple = ()
    bias_count: int = 0
    heavy_frac: float = 0.95
    light_frac: float = 0.05
    shared_init: bool = False
    rounds: int = 1

    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    last_layer_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mu: float = 0.0
    augment: bool = False

    cost_mode: str = "bbp"
    epsilon: float = 1.0
    kappa: float = 0.0
    gamma0: float = 7.0
    sigma0_sq: float = 1.0
    sigma_sq: float = 1.0
    match_passes: int = 1

    data_seed: int = 0
    init_seed: int = 0
    match_seed: int | None = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        validate(self)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


_PARSERS = {
    "hidden": _ints, "input_shape": _ints, "bias_classes": _ints, "shared_init": _bool,
    "augment": _bool, "match_seed": _opt_int,
}
KEYS = {f.name: f.default for f in fields(ExperimentConfig)}


def _parse(key, text):
    if key not in KEYS:
        raise ConfigError("unknown key", key)
    parser = _PARSERS.get(key)
    if parser is None:
        parser = type(KEYS[key])
    try:
        return parser(text.strip()) if parser is not str else text.strip()
    except ValueError as err:
        raise ConfigError(f"cannot parse {text!r}: {err}", key) from None


def format_value(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text, overrides=None):
    """Config from ``key = value`` lines, then ``overrides`` (a dict of strings) on top."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value", line)
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _parse(key, value)
    for key, value in (overrides or {}).items():
        values[key] = _parse(key, value)
    return ExperimentConfig(**values)


def load(path, overrides=None):
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), overrides)


def dumps(cfg):
    return "".join(f"{k} = {format_value(v)}\n" for k, v in cfg.items())


def validate(cfg):
    for key, allowed in (("dataset", DATASETS), ("model", MODELS), ("strategy", STRATEGIES),
                         ("cost_mode", ("euclidean", "bbp"))):
        if getattr(cfg, key) not in allowed:
            raise ConfigError(f"must be one of {allowed}", key)
    if cfg.partition not in PARTITIONS:
        raise ConfigError(f"must be one of {PARTITIONS}", "partition")
    for key in ("clients", "rounds", "epochs", "batch_size", "match_passes", "seq_len"):
        if getattr(cfg, key) < 1:
            raise ConfigError("must be >= 1", key)
    for key in ("train_samples", "test_samples", "min_points", "bias_count"):
        if getattr(cfg, key) < 0:
            raise ConfigError("must be >= 0", key)
    for key in ("lr", "last_layer_lr", "alpha", "gamma0", "sigma0_sq", "sigma_sq"):
        v = getattr(cfg, key)
        if not (v > 0 and math.isfinite(v)):
            raise ConfigError("must be positive and finite", key)
    if cfg.mu < 0:
        raise ConfigError("must be >= 0", "mu")
    if cfg.mu != 0 and cfg.strategy != "fedprox":
        raise ConfigError("only meaningful with strategy = fedprox", "mu")
    if cfg.strategy == "fedma" and cfg.rounds != 1:
        raise ConfigError("fedma runs exactly one pass; use strategy = fedma-comm for more", "rounds")
    if cfg.strategy in ("ensemble", "centralized") and cfg.rounds != 1:
        raise ConfigError(f"{cfg.strategy} has a single round", "rounds")
    if not 0 <= cfg.light_frac <= 1 or not 0 <= cfg.heavy_frac <= 1:
        raise ConfigError("fractions must lie in [0, 1]", "heavy_frac")
    if cfg.partition == "bias":
        if cfg.clients != 2:
            raise ConfigError("the grayscale-bias split has exactly 2 clients", "clients")
        if not cfg.bias_classes and cfg.bias_count == 0:
            raise ConfigError("set bias_classes or bias_count", "bias_classes")
    if cfg.partition == "roles" and cfg.dataset != "text":
        raise ConfigError("role partitioning needs dataset = text", "partition")
    if cfg.dataset == "text":
        if cfg.partition != "roles":
            raise ConfigError("text data is partitioned by speaking role", "partition")
        if not cfg.text_path:
            raise ConfigError("required for dataset = text", "text_path")
    if cfg.model == "custom":
        if not cfg.layers:
            raise ConfigError("required for model = custom", "layers")
        if not cfg.input_shape:
            raise ConfigError("required for model = custom", "input_shape")
    if cfg.partition == "data-efficiency" and not 1 <= cfg.stage <= 5:
        raise ConfigError("must lie in 1..5", "stage")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError("must lie in [0, 1)", "momentum")
