"""``fedma`` command-line entry point.

Verbs: run, sweep-epochs, match, filter-dump, partition.  Any config key can
be overridden on the command line as ``--key value`` (dashes or
underscores).  Exit codes: 0 ok, 2 configuration or input error, 3 divergence.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import config as config_mod
from . import experiment
from .errors import DivergenceError, FedMAError, NumericalInstabilityError
from .matching import MatchConfig
from .nn import checkpoint
from .nn.layers import Conv2d, Dense
from .nn.network import check_input, partial_forward
from .protocols import match_networks

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _split_overrides(extra):
    """``--key value`` / ``--key=value`` pairs left over after argparse."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or tok == "--":
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"{tok} needs a value")
            value = extra[i + 1]
            i += 2
        key = key.replace("-", "_")
        if key not in config_mod.KEYS:
            raise config_mod.ConfigError("unknown key", key)
        out[key] = value
    return out


def _load_config(path, extra, **forced):
    overrides = _split_overrides(extra)
    overrides.update({k: str(v) for k, v in forced.items() if v is not None})
    if path is None:
        return config_mod.parse_text("", overrides)
    return config_mod.load(path, overrides)


def _parent(path):
    """Create the directory ``path`` will be written into; returns ``path``."""
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    return path


# ---------------------------------------------------------------- verbs

def cmd_run(args, extra):
    cfg = _load_config(args.config, extra, output_dir=args.out)
    outcome = experiment.run_to_dir(cfg, cfg.output_dir, args.threads)
    last = outcome.reports[-1]
    print(f"{cfg.strategy}: {len(outcome.reports)} rounds, final accuracy {outcome.final_accuracy:.4f}, "
          f"growth rate {last.growth_rate:.4f}")
    print(f"wrote {os.path.join(cfg.output_dir, 'rounds.csv')}")
    return EXIT_OK


def cmd_sweep_epochs(args, extra):
    cfg = _load_config(args.config, extra, output_dir=args.out)
    epochs = [int(e) for e in args.epochs_list.split(",") if e.strip()]
    strategies = [s.strip() for s in (args.strategies or cfg.strategy).split(",") if s.strip()]
    if not epochs:
        raise config_mod.ConfigError("give at least one epoch count", "epochs")
    os.makedirs(cfg.output_dir, exist_ok=True)
    summary = os.path.join(cfg.output_dir, "sweep.csv")
    rows = []
    for e in epochs:
        for strategy in strategies:
            sub = experiment.with_overrides(
                cfg, epochs=e, strategy=strategy,
                mu=cfg.mu if strategy == "fedprox" else 0.0,
                output_dir=os.path.join(cfg.output_dir, f"E{e}-{strategy}"))
            outcome = experiment.run_to_dir(sub, sub.output_dir, args.threads)
            rows.append((e, strategy, outcome.final_accuracy))
            with open(summary, "w", newline="") as fh:
                out = csv.writer(fh)
                out.writerow(["epochs", "strategy", "accuracy"])
                out.writerows([(a, b, repr(float(c))) for a, b, c in rows])
            print(f"E={e} {strategy}: {outcome.final_accuracy:.4f}")
    print(f"wrote {summary}")
    return EXIT_OK


def cmd_match(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    models = [checkpoint.load(p) for p in args.checkpoints]
    cfg = MatchConfig(cost_mode=args.cost_mode, epsilon=args.epsilon, kappa=args.kappa,
                      gamma0=args.gamma0, sigma0_sq=args.sigma0_sq, sigma_sq=args.sigma_sq,
                      passes=args.passes, client_order_seed=args.match_seed)
    global_model, assignments = match_networks(models, cfg)
    checkpoint.save(global_model, _parent(args.out))
    if args.assignments:
        with open(_parent(args.assignments), "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["layer", "client", "local_index", "global_index"])
            for n, per_client in enumerate(assignments, start=1):
                for j, a in enumerate(per_client):
                    for l, g in enumerate(a.mapping):
                        out.writerow([n, j, l, int(g)])
    growth = global_model.param_count() / models[0].param_count()
    print(f"growth rate {growth:.6f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _filter_position(model, n):
    if not 1 <= n <= model.depth:
        raise config_mod.ConfigError(f"must lie in 1..{model.depth}", "layer")
    pos = model.position(n)
    layer = model.layers[pos]
    if not isinstance(layer, (Conv2d, Dense)):
        raise config_mod.ConfigError(f"layer {n} is a {layer.kind} layer, not conv or dense", "layer")
    return pos


def filter_maps(model, n, image):
    """Output of weighted layer ``n`` for one input, as ``(units, rows, cols)``."""
    pos = _filter_position(model, n)
    batch = check_input(model, np.asarray(image, dtype=np.float64)[None])
    out = partial_forward(model, batch, pos + 1)[0]
    return out.reshape(out.shape[0], 1, 1) if out.ndim == 1 else out


def _read_image(source, model):
    if source == "zeros":
        return np.zeros(model.input_shape)
    img = np.load(source)
    return img[0] if img.ndim == len(model.input_shape) + 1 else img


def cmd_filter_dump(args, extra):
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    model = checkpoint.load(args.checkpoint)
    _filter_position(model, args.layer)
    maps = filter_maps(model, args.layer, _read_image(args.image, model))
    with open(_parent(args.out), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["filter", "row", "col", "value"])
        for f in range(maps.shape[0]):
            for r in range(maps.shape[1]):
                for c in range(maps.shape[2]):
                    out.writerow([f, r, c, repr(float(maps[f, r, c]))])
    print(f"{maps.shape[0]} maps of {maps.shape[1]}x{maps.shape[2]} written to {args.out}")
    return EXIT_OK


def cmd_partition(args, extra):
    cfg = _load_config(args.config, extra)
    _, _, plan = experiment.load_data(cfg)
    plan.to_csv(_parent(args.out))
    sizes = ", ".join(str(s) for s in plan.sizes())
    print(f"{plan.strategy}: {plan.client_count} clients ({sizes})")
    if plan.empty_clients:
        print(f"empty clients: {list(plan.empty_clients)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="fedma", description="Federated matched averaging experiments.")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config", nargs="?")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep-epochs", help="final accuracy for each local epoch count")
    s.add_argument("config", nargs="?")
    s.add_argument("--epochs-list", required=True, help="comma-separated, e.g. 10,20,50")
    s.add_argument("--strategies", help="comma-separated; default: the config's strategy")
    s.add_argument("--out")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_sweep_epochs)

    m = sub.add_parser("match", help="matched averaging of saved checkpoints")
    m.add_argument("checkpoints", nargs="+")
    m.add_argument("--out", required=True)
    m.add_argument("--assignments", help="CSV of layer,client,local_index,global_index")
    m.add_argument("--cost-mode", default="bbp", choices=("bbp", "euclidean"))
    m.add_argument("--epsilon", type=float, default=1.0)
    m.add_argument("--kappa", type=float, default=0.0)
    m.add_argument("--gamma0", type=float, default=7.0)
    m.add_argument("--sigma0-sq", type=float, default=1.0)
    m.add_argument("--sigma-sq", type=float, default=1.0)
    m.add_argument("--passes", type=int, default=1)
    m.add_argument("--match-seed", type=int, default=0)
    m.set_defaults(func=cmd_match)

    f = sub.add_parser("filter-dump", help="activation maps of one layer as CSV")
    f.add_argument("checkpoint")
    f.add_argument("--layer", type=int, required=True, help="1-based weighted layer index")
    f.add_argument("--image", required=True, help=".npy file or 'zeros'")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_filter_dump)

    q = sub.add_parser("partition", help="write the client partition as CSV")
    q.add_argument("config", nargs="?")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_partition)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args, extra)
    except (DivergenceError, NumericalInstabilityError) as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedMAError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
