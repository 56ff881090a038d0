"""Federation strategies over simulated clients.

Every strategy runs with full participation.  Clients are plain
:class:`ClientState` records; strategies return new records rather than
mutating the ones they were given.  Message sizes count 8 bytes per real
with no framing overhead.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .matching import MatchConfig, average_layer, matched_average
from .nn.network import NetworkModel, evaluate, predict_proba
from .nn.training import SgdConfig, train_local
from .permutation import apply_perm_in, extract_neurons, restrict_network

BYTES_PER_REAL = 8
REPORT_FIELDS = ("round", "strategy", "accuracy", "bytes_up", "bytes_down", "global_params",
                 "growth_rate")


@dataclass(frozen=True, eq=False)
class ClientState:
    id: int
    model: NetworkModel
    dataset: object
    class_counts: np.ndarray = field(init=False)
    data_size: int = field(init=False)

    def __post_init__(self):
        counts = np.bincount(np.asarray(self.dataset.labels, dtype=np.int64),
                             minlength=self.model.num_classes)
        object.__setattr__(self, "class_counts", counts)
        object.__setattr__(self, "data_size", int(counts.sum()))

    def with_model(self, model):
        return ClientState(self.id, model, self.dataset)


@dataclass(frozen=True)
class RoundReport:
    round: int
    strategy: str
    accuracy: float
    bytes_up: int
    bytes_down: int
    global_params: int
    growth_rate: float

    def row(self):
        return [self.round, self.strategy, repr(float(self.accuracy)), self.bytes_up,
                self.bytes_down, self.global_params, repr(float(self.growth_rate))]


def write_reports(reports, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(REPORT_FIELDS)
        for r in reports:
            out.writerow(r.row())


def read_reports(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RoundReport(int(r["round"]), r["strategy"], float(r["accuracy"]), int(r["bytes_up"]),
                        int(r["bytes_down"]), int(r["global_params"]), float(r["growth_rate"]))
            for r in rows]


def account_message(obj):
    """Bytes needed to send a model, a layer's parameter dict, or a list of those."""
    if obj is None:
        return 0
    if isinstance(obj, NetworkModel):
        return BYTES_PER_REAL * obj.param_count()
    if isinstance(obj, dict):
        return BYTES_PER_REAL * sum(int(np.asarray(v).size) for v in obj.values())
    return sum(account_message(o) for o in obj)


def _pmap(fn, items, threads=1):
    # results come back in input order, so thread count never changes the outcome
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _seeded(cfg, *key):
    seed = int(np.random.SeedSequence([cfg.seed, *key]).generate_state(1)[0])
    return replace(cfg, seed=seed)


def _signature(model):
    return tuple((layer.kind, getattr(layer, "activation", None)) for layer in model.layers)


def check_architectures(models):
    """Clients must share layer kinds and order; widths may differ."""
    models = list(models)
    if not models:
        raise ConfigError("at least one client is required", "clients")
    ref = _signature(models[0])
    for j, m in enumerate(models[1:], start=1):
        if _signature(m) != ref:
            raise DimensionError(f"client {j} has a different layer structure from client 0")
        if m.input_shape != models[0].input_shape or m.num_classes != models[0].num_classes:
            raise DimensionError(f"client {j} disagrees on input shape or class count")


# ---------------------------------------------------------------- aggregation

def weighted_last_layer(models, class_counts):
    """Output layer blended class by class with each client's share of that class.

    ``models`` must already have their last-layer inputs in global order.
    Classes that no client holds fall back to uniform weights.
    """
    models = list(models)
    counts = np.asarray(class_counts, dtype=np.float64)
    pos = models[0].weighted_indices[-1]
    layer = models[0].layers[pos]
    shapes = {m.params[pos]["weight"].shape for m in models}
    if len(shapes) != 1:
        raise DimensionError(f"last layers are not aligned: shapes {sorted(shapes)}")
    if counts.shape != (len(models), layer.out_features):
        raise DimensionError(f"class counts must have shape ({len(models)}, {layer.out_features})")
    totals = counts.sum(axis=0)
    share = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / len(models))
    weight = sum(s[None, :] * m.params[pos]["weight"] for s, m in zip(share, models))
    bias = sum(s * m.params[pos]["bias"] for s, m in zip(share, models))
    return layer, {"weight": weight, "bias": bias}


def fedavg_aggregate(models, sizes):
    """Element-wise mean of the parameters weighted by ``sizes``."""
    models = list(models)
    sizes = np.asarray(sizes, dtype=np.float64)
    ref = models[0]
    for m in models[1:]:
        if m.layers != ref.layers:
            raise DimensionError("element-wise averaging needs identical architectures")
    if not sizes.sum() > 0:
        raise ConfigError("client sizes must have a positive total", "sizes")
    w = sizes / sizes.sum()
    params = []
    for pos, p in enumerate(ref.params):
        params.append({k: sum(wj * m.params[pos][k] for wj, m in zip(w, models)) for k in p})
    return NetworkModel(ref.layers, params, ref.input_shape)


def ensemble_predict_proba(models, batch):
    return np.mean([predict_proba(m, batch) for m in models], axis=0)


def ensemble_eval(models, dataset, batch_size=512):
    """Accuracy of the uniform softmax average of ``models``."""
    models = [m.model if isinstance(m, ClientState) else m for m in models]
    correct = 0
    for s in range(0, len(dataset), batch_size):
        p = ensemble_predict_proba(models, dataset.features[s:s + batch_size])
        correct += int((np.argmax(p, axis=1) == dataset.labels[s:s + batch_size]).sum())
    return correct / len(dataset)


def _accuracy(model, test_set):
    return evaluate(model, test_set) if test_set is not None else math.nan


# ---------------------------------------------------------------- FedMA

@dataclass
class LayerRound:
    layer: int
    global_size: int
    assignments: list
    bytes_up: int
    bytes_down: int


@dataclass
class FedmaResult:
    global_model: NetworkModel
    reports: list
    assignments: list       # assignments[n - 1][j] for hidden layer n
    clients: list           # client states at the end of the pass
    layers: list = field(default_factory=list)

    @property
    def growth_rate(self):
        return self.reports[-1].growth_rate


def _install_layer(model, n, layer, params, perm):
    """Swap in global layer ``n`` and route the next layer's inputs through ``perm``."""
    pos = model.position(n)
    layers, plist = list(model.layers), [dict(p) for p in model.params]
    layers[pos] = layer
    plist[pos] = {k: v.copy() for k, v in params.items()}
    wide = NetworkModel(layers, plist, model.input_shape, check=False)
    out = apply_perm_in(wide, n + 1, perm)
    return NetworkModel(out.layers, out.params, out.input_shape)


def _layerwise(models, counts, match_cfg, after_layer=None):
    """Shared layer loop: match layer ``n``, install it, let clients adapt, repeat."""
    check_architectures(models)
    models = list(models)
    depth = models[0].depth
    rounds = []
    for n in range(1, depth):
        bundles = [extract_neurons(m, n, client=j) for j, m in enumerate(models)]
        result = matched_average(bundles, match_cfg)
        layer, params = average_layer(result.atoms, result.assignments, bundles)
        up = sum(account_message(m.params[m.position(n)]) for m in models)
        models = [_install_layer(m, n, layer, params, a) for m, a in zip(models, result.assignments)]
        rounds.append(LayerRound(n, result.global_size, list(result.assignments), up,
                                 len(models) * account_message(params)))
        if after_layer is not None:
            models = after_layer(n, models)
    pos = models[0].weighted_indices[-1]
    up = sum(account_message(m.params[pos]) for m in models)
    layer, params = weighted_last_layer(models, counts)
    global_model = models[0].replace_layer(pos, layer, params)
    rounds.append(LayerRound(depth, layer.out_features, None, up,
                             len(models) * account_message(params)))
    return global_model, models, rounds


def match_networks(models, match_cfg=None, class_counts=None):
    """Layer-by-layer matched averaging of whole networks without retraining.

    Returns ``(global_model, assignments)``.  Without ``class_counts`` the
    output layer is a plain average.
    """
    models = list(models)
    match_cfg = match_cfg or MatchConfig()
    if class_counts is None:
        class_counts = np.ones((len(models), models[0].num_classes))
    global_model, _, rounds = _layerwise(models, class_counts, match_cfg)
    return global_model, [r.assignments for r in rounds[:-1]]


def fedma_pass(clients, match_cfg=None, sgd_cfg=None, retrain=True, test_set=None,
               round_offset=0, reference_params=None, threads=1, strategy="fedma",
               augment=None, pass_index=0):
    """One FedMA pass: N communication rounds, one per weighted layer.

    Hidden layers are matched, broadcast and frozen in turn while clients
    retrain the layers above; the output layer is blended by class share.
    ``retrain=False`` skips client retraining.  Only the last report carries
    an accuracy, since no complete global model exists before then.
    """
    clients = list(clients)
    match_cfg = match_cfg or MatchConfig()
    sgd_cfg = sgd_cfg or SgdConfig()
    models = [c.model for c in clients]
    check_architectures(models)
    reference = reference_params or models[0].param_count()
    counts = np.stack([c.class_counts for c in clients])

    def retrain_suffix(n, current):
        if not retrain:
            return current

        def job(jm):
            j, m = jm
            cfg = _seeded(sgd_cfg, pass_index, n, clients[j].id)
            return train_local(m, clients[j].dataset, cfg, frozen_prefix=n, augment=augment)
        return _pmap(job, enumerate(current), threads)

    global_model, models, rounds = _layerwise(models, counts, match_cfg, retrain_suffix)
    reports = []
    for r in rounds:
        final = r.layer == global_model.depth
        size = global_model.param_count() if final else models[0].param_count()
        reports.append(RoundReport(round_offset + r.layer, strategy,
                                   _accuracy(global_model, test_set) if final else math.nan,
                                   r.bytes_up, r.bytes_down, size, size / reference))
    new_clients = [c.with_model(m) for c, m in zip(clients, models)]
    return FedmaResult(global_model, reports, [r.assignments for r in rounds[:-1]], new_clients, rounds)


def reconstruct_local(global_model, assignments):
    """The client's L_j-wide model: the global atoms its assignments point at."""
    return restrict_network(global_model, list(assignments))


def fedma_with_comm(clients, rounds, match_cfg=None, sgd_cfg=None, test_set=None, threads=1,
                    augment=None, reference_params=None, strategy="fedma-comm", on_pass=None):
    """Repeated FedMA passes with local models rebuilt from the matched global model.

    ``rounds`` counts passes.  Between passes each client keeps exactly the
    global atoms its previous assignments reached, trains for ``sgd_cfg.epochs``
    epochs on its data, and the next pass starts again from layer 1.
    ``on_pass`` is called with each pass's reports as soon as it completes.
    Returns ``(result of the last pass, all reports)``.
    """
    if int(rounds) != rounds or rounds < 1:
        raise ConfigError("must be an integer >= 1", "rounds")
    clients = list(clients)
    sgd_cfg = sgd_cfg or SgdConfig()
    reference = reference_params or clients[0].model.param_count()
    depth = clients[0].model.depth
    reports = []
    result = None
    for p in range(rounds):
        if result is not None:
            rebuilt = [c.with_model(reconstruct_local(result.global_model, [a[j] for a in result.assignments]))
                       for j, c in enumerate(clients)]
            clients = train_clients(rebuilt, sgd_cfg, threads, augment, tag=p)
        result = fedma_pass(clients, match_cfg, sgd_cfg, test_set=test_set, round_offset=p * depth,
                            reference_params=reference, threads=threads, strategy=strategy,
                            augment=augment, pass_index=p + 1)
        reports.extend(result.reports)
        if on_pass is not None:
            on_pass(result.reports)
    return result, reports


def equivalent_fedavg_rounds(passes, depth):
    """FedAvg rounds with the same number of communications as ``passes`` FedMA passes."""
    return int(passes) * int(depth)


# ---------------------------------------------------------------- FedAvg / FedProx

def _local_round(clients, global_model, sgd_cfg, mu, round_index, threads, augment):
    def job(c):
        start = c.model if global_model is None else global_model
        cfg = _seeded(replace(sgd_cfg, prox_mu=mu), round_index, c.id)
        anchor = start if mu > 0 else None
        return c.with_model(train_local(start, c.dataset, cfg, anchor=anchor, augment=augment))
    return _pmap(job, clients, threads)


def fedavg_round(clients, global_model=None, sgd_cfg=None, round_index=0, threads=1, augment=None,
                 train=True):
    """Local training from ``global_model`` (or each client's own model), then averaging.

    Returns ``(global_model, trained_clients)``.
    """
    return fedprox_round(clients, global_model, 0.0, sgd_cfg, round_index, threads, augment, train)


def fedprox_round(clients, global_model=None, mu=0.001, sgd_cfg=None, round_index=0, threads=1,
                  augment=None, train=True):
    """FedAvg with the proximal pull ``(mu/2)·||w - w_global||²`` during local training."""
    if mu < 0:
        raise ConfigError("must be >= 0", "mu")
    clients = list(clients)
    sgd_cfg = sgd_cfg or SgdConfig()
    if train:
        clients = _local_round(clients, global_model, sgd_cfg, mu, round_index, threads, augment)
    new = fedavg_aggregate([c.model for c in clients], [c.data_size for c in clients])
    return new, clients


def run_fedavg(clients, rounds, sgd_cfg=None, mu=0.0, test_set=None, threads=1, augment=None,
               strategy=None):
    """``rounds`` rounds of FedAvg (``mu == 0``) or FedProx; returns ``(global, reports)``."""
    if int(rounds) != rounds or rounds < 1:
        raise ConfigError("must be an integer >= 1", "rounds")
    clients = list(clients)
    strategy = strategy or ("fedprox" if mu > 0 else "fedavg")
    reference = clients[0].model.param_count()
    global_model = None
    reports = []
    for r in range(rounds):
        global_model, clients = fedprox_round(clients, global_model, mu, sgd_cfg, r, threads, augment)
        size = global_model.param_count()
        up = sum(account_message(c.model) for c in clients)
        reports.append(RoundReport(r + 1, strategy, _accuracy(global_model, test_set), up,
                                   len(clients) * account_message(global_model), size,
                                   size / reference))
    return global_model, reports


def train_clients(clients, sgd_cfg=None, threads=1, augment=None, tag=0):
    """Independent local training of every client from its current model."""
    sgd_cfg = sgd_cfg or SgdConfig()

    def job(c):
        return c.with_model(train_local(c.model, c.dataset, _seeded(sgd_cfg, tag, c.id),
                                        augment=augment))
    return _pmap(job, list(clients), threads)


def train_centralized(model, dataset, sgd_cfg=None, augment=None):
    """Pooled-data baseline."""
    return train_local(model, dataset, sgd_cfg or SgdConfig(), augment=augment)


__all__ = [
    "BYTES_PER_REAL", "ClientState", "FedmaResult", "LayerRound", "REPORT_FIELDS", "RoundReport",
    "account_message", "check_architectures", "ensemble_eval", "ensemble_predict_proba",
    "equivalent_fedavg_rounds", "fedavg_aggregate", "fedavg_round", "fedma_pass",
    "fedma_with_comm", "fedprox_round", "match_networks", "read_reports", "reconstruct_local",
    "run_fedavg", "train_centralized", "train_clients", "weighted_last_layer", "write_reports",
]
