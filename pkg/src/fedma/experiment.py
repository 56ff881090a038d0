"""Experiment orchestration: data, clients and strategy from one config."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from . import config as config_mod
from .data import (
    Dataset,
    PartitionPlan,
    apply_grayscale_bias,
    augment,
    char_text_dataset,
    data_efficiency_plan,
    load_cifar_bin,
    load_mnist,
    partition_dirichlet,
    partition_homogeneous,
    stratified_sample,
    synth_classification,
    synth_images,
)
from .errors import ConfigError
from .matching import MatchConfig
from .nn import checkpoint
from .nn.layers import LAYER_TYPES
from .nn.network import build_model, char_lstm, evaluate, lenet, mlp, small_cnn, vgg9
from .nn.training import SgdConfig
from .protocols import (
    ClientState,
    RoundReport,
    account_message,
    ensemble_eval,
    fedma_with_comm,
    fedprox_round,
    train_centralized,
    train_clients,
    write_reports,
)

CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]


# ---------------------------------------------------------------- data

def _data_root(cfg):
    return cfg.data_dir or os.environ.get("FEDMA_DATA_DIR", "")


def _cifar(root, names):
    for sub in ("", "cifar-10-batches-bin"):
        paths = [os.path.join(root, sub, n) for n in names]
        if all(os.path.exists(p) for p in paths):
            return load_cifar_bin(paths)
    raise FileNotFoundError(f"CIFAR-10 binary batches not found under {root!r}")


def _limit(ds, n, seed):
    return stratified_sample(ds, n, seed) if n else ds


def grayscale_bias_split(train, test, biased, heavy_frac=0.95, light_frac=0.05, seed=0):
    """Skewed training set, a half-grayscale test set, and a 2-client domain plan.

    Client 0 receives every grayscale training image and client 1 every colour one.
    """
    biased_train, gray = apply_grayscale_bias(train, biased, heavy_frac, light_frac, seed)
    half_test, _ = apply_grayscale_bias(test, list(range(test.num_classes)), 0.5, 0.5, seed + 1)
    plan = PartitionPlan(2, (np.flatnonzero(gray), np.flatnonzero(~gray)), seed, "bias")
    return biased_train, half_test, plan


def load_data(cfg):
    """``(train, test, plan)`` for a config; pooled strategies ignore ``plan``."""
    seed = cfg.data_seed
    if cfg.dataset == "text":
        with open(cfg.text_path, encoding="utf-8") as fh:
            text = fh.read()
        shards, test, _ = char_text_dataset(text, cfg.seq_len, cfg.clients, cfg.min_points, seed=seed)
        if not shards:
            raise ConfigError("no speaking role has enough characters", "min_points")
        offsets = np.cumsum([0] + [len(s) for s in shards])
        train = Dataset(np.concatenate([s.features for s in shards]),
                        np.concatenate([s.labels for s in shards]), shards[0].num_classes)
        plan = PartitionPlan(len(shards), tuple(np.arange(a, b) for a, b in zip(offsets, offsets[1:])),
                             seed, "roles")
        return train, _limit(test, cfg.test_samples, seed), plan
    if cfg.dataset == "mnist":
        root = _data_root(cfg) or None
        train, test = load_mnist("train", root), load_mnist("test", root)
    elif cfg.dataset == "cifar10":
        root = _data_root(cfg)
        train, test = _cifar(root, CIFAR_TRAIN), _cifar(root, CIFAR_TEST)
    elif cfg.dataset == "synth":
        n_train = cfg.train_samples or 1000
        n_test = cfg.test_samples or 1000
        full = synth_classification(cfg.synth_classes, n_train + n_test, cfg.synth_dim, seed)
        train, test = full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_test))
    else:
        n_train = cfg.train_samples or 2000
        n_test = cfg.test_samples or 2000
        full = synth_images(cfg.synth_classes, n_train + n_test, cfg.synth_size, seed, cfg.synth_noise)
        train, test = full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_test))
    train = _limit(train, cfg.train_samples, seed)
    test = _limit(test, cfg.test_samples, seed + 1)
    if cfg.partition == "bias":
        biased = cfg.bias_classes or cfg.bias_count
        train, test, plan = grayscale_bias_split(train, test, biased, cfg.heavy_frac, cfg.light_frac, seed)
    elif cfg.partition == "homogeneous":
        plan = partition_homogeneous(train, cfg.clients, seed)
    elif cfg.partition == "dirichlet":
        plan = partition_dirichlet(train, cfg.clients, cfg.alpha, seed)
    elif cfg.partition == "data-efficiency":
        plan = data_efficiency_plan(train, alpha=cfg.alpha, seed=seed)[cfg.stage - 1]
    else:
        raise ConfigError("role partitioning needs dataset = text", "partition")
    return train, test, plan


# ---------------------------------------------------------------- models

def parse_layers(text):
    """Layers from ``kind:arg:arg;kind:arg`` with arguments in field order."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(";"))):
        kind, *args = item.split(":")
        if kind not in LAYER_TYPES:
            raise ConfigError(f"unknown layer kind {kind!r}", "layers")
        cls = LAYER_TYPES[kind]
        names = [f.name for f in fields(cls)]
        if len(args) > len(names):
            raise ConfigError(f"{kind} takes at most {len(names)} arguments", "layers")
        values = [checkpoint._parse_value(a) for a in args]
        try:
            out.append(cls(*values))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"{item!r}: {err}", "layers") from None
    if not out:
        raise ConfigError("no layers given", "layers")
    return out


def make_model(cfg, train, seed):
    shape = train.features.shape[1:]
    k = train.num_classes
    if cfg.model == "lenet":
        return lenet(k, in_channels=shape[0], image_size=shape[-1], seed=seed)
    if cfg.model == "mlp":
        x = int(np.prod(shape))
        if len(shape) != 1:
            raise ConfigError("mlp needs flat features", "model")
        return mlp(x, list(cfg.hidden), k, seed=seed)
    if cfg.model == "char-lstm":
        return char_lstm(k, cfg.embed_dim, cfg.hidden_size, seed=seed)
    if cfg.model == "small-cnn":
        return small_cnn(k, in_channels=shape[0], image_size=shape[-1], seed=seed)
    if cfg.model == "vgg9":
        return vgg9(k, seed=seed)
    return build_model(parse_layers(cfg.layers), cfg.input_shape, seed)


def _flatten_if_needed(cfg, ds):
    if cfg.model == "mlp" and ds.features.ndim > 2:
        return Dataset(ds.features.reshape(len(ds), -1), ds.labels, ds.num_classes)
    return ds


def init_seed_for(cfg, client):
    if cfg.shared_init:
        return cfg.init_seed
    return int(np.random.SeedSequence([cfg.init_seed, client]).generate_state(1)[0])


def sgd_config(cfg):
    return SgdConfig(learning_rate=cfg.lr, last_layer_lr=cfg.last_layer_lr, momentum=cfg.momentum,
                     weight_decay=cfg.weight_decay, epochs=cfg.epochs, batch_size=cfg.batch_size,
                     seed=cfg.init_seed)


def match_config(cfg):
    return MatchConfig(cost_mode=cfg.cost_mode, epsilon=cfg.epsilon, kappa=cfg.kappa,
                       gamma0=cfg.gamma0, sigma0_sq=cfg.sigma0_sq, sigma_sq=cfg.sigma_sq,
                       passes=cfg.match_passes, client_order_seed=cfg.match_seed)


def _augmenter(cfg):
    if not cfg.augment:
        return None
    return lambda batch, rng: augment(batch, rng)


# ---------------------------------------------------------------- running

@dataclass
class Outcome:
    reports: list
    model: object
    clients: list
    test_set: Dataset

    @property
    def final_accuracy(self):
        for r in reversed(self.reports):
            if not math.isnan(r.accuracy):
                return r.accuracy
        return math.nan


def run(cfg, threads=1, out_dir=None):
    """Run one experiment; with ``out_dir`` the rounds are flushed to ``rounds.csv`` as they finish."""
    train, test, plan = load_data(cfg)
    train, test = _flatten_if_needed(cfg, train), _flatten_if_needed(cfg, test)
    sgd = sgd_config(cfg)
    aug = _augmenter(cfg)
    reports = []

    def emit(new):
        reports.extend(new)
        if out_dir is not None:
            write_reports(reports, os.path.join(out_dir, "rounds.csv"))

    if cfg.strategy == "centralized":
        model = train_centralized(make_model(cfg, train, init_seed_for(cfg, 0)), train, sgd, aug)
        size = model.param_count()
        emit([RoundReport(1, "centralized", evaluate(model, test), 0, 0, size, 1.0)])
        return Outcome(reports, model, [], test)

    shards = [train.subset(idx) for idx in plan.indices]
    clients = [ClientState(j, make_model(cfg, train, init_seed_for(cfg, j)), shard)
               for j, shard in enumerate(shards) if len(shard)]
    if not clients:
        raise ConfigError("every client received an empty shard", "partition")
    reference = clients[0].model.param_count()

    if cfg.strategy in ("fedavg", "fedprox"):
        global_model = None
        for r in range(cfg.rounds):
            global_model, clients = fedprox_round(clients, global_model, cfg.mu, sgd, r, threads, aug)
            size = global_model.param_count()
            emit([RoundReport(r + 1, cfg.strategy, evaluate(global_model, test),
                              sum(account_message(c.model) for c in clients),
                              len(clients) * account_message(global_model), size, size / reference)])
        return Outcome(reports, global_model, clients, test)

    clients = train_clients(clients, sgd, threads, aug)
    if cfg.strategy == "ensemble":
        size = sum(c.model.param_count() for c in clients)
        emit([RoundReport(1, "ensemble", ensemble_eval(clients, test),
                          sum(account_message(c.model) for c in clients), 0, size, size / reference)])
        return Outcome(reports, clients[0].model, clients, test)

    result, _ = fedma_with_comm(clients, cfg.rounds, match_config(cfg), sgd, test, threads, aug,
                                reference, cfg.strategy, on_pass=emit)
    return Outcome(reports, result.global_model, result.clients, test)


def write_manifest(cfg, path, extra=()):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# resolved configuration; rerun with: fedma run <this file>\n")
        fh.write(config_mod.dumps(cfg))
        for key, value in extra:
            fh.write(f"# {key}: {value}\n")


def run_to_dir(cfg, out_dir, threads=1):
    """``run`` plus rounds.csv, final.fma and manifest.txt inside ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(cfg, os.path.join(out_dir, "manifest.txt"), [("threads", threads)])
    outcome = run(cfg, threads, out_dir)
    checkpoint.save(outcome.model, os.path.join(out_dir, "final.fma"))
    return outcome


def with_overrides(cfg, **changes):
    return replace(cfg, **changes)
