"""Federated partitioners producing per-client index lists."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    client_count: int
    indices: tuple
    seed: int
    strategy: str
    proportions: np.ndarray | None = None
    empty_clients: tuple = field(init=False)

    def __post_init__(self):
        idx = tuple(np.sort(np.asarray(i, dtype=np.int64)) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "empty_clients", tuple(j for j, i in enumerate(idx) if len(i) == 0))
        if len(idx) != self.client_count:
            raise ConfigError("one index list per client is required", "client_count")

    def sizes(self):
        return [len(i) for i in self.indices]

    def shards(self, dataset):
        return [dataset.subset(i) for i in self.indices]

    def histograms(self, labels, num_classes):
        labels = np.asarray(labels)
        return np.array([np.bincount(labels[i], minlength=num_classes) for i in self.indices])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["client", "index"])
            for j, idx in enumerate(self.indices):
                for i in idx:
                    w.writerow([j, int(i)])

    @classmethod
    def from_csv(cls, path, client_count=None, seed=0, strategy="csv"):
        rows = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.setdefault(int(row["client"]), []).append(int(row["index"]))
        count = client_count if client_count is not None else (max(rows) + 1 if rows else 0)
        return cls(count, tuple(rows.get(j, []) for j in range(count)), seed, strategy)


def _check_clients(j):
    if int(j) != j or j < 1:
        raise ConfigError("client count must be a positive integer", "clients")


def _class_members(labels, rng, num_classes=None):
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return [rng.permutation(np.flatnonzero(labels == c)) for c in range(k)]


def partition_homogeneous(dataset, clients, seed=0):
    """Every client gets floor or ceil of ``n_k / J`` examples of each class k.

    Remainders are dealt round-robin, continuing across classes, so totals per
    client also differ by at most one.
    """
    _check_clients(clients)
    rng = np.random.default_rng(seed)
    shards = [[] for _ in range(clients)]
    cursor = 0
    for members in _class_members(dataset.labels, rng, dataset.num_classes):
        base, extra = divmod(len(members), clients)
        counts = np.full(clients, base)
        for r in range(extra):
            counts[(cursor + r) % clients] += 1
        cursor = (cursor + extra) % clients
        for j, chunk in enumerate(np.split(members, np.cumsum(counts)[:-1])):
            shards[j].extend(chunk.tolist())
    return PartitionPlan(clients, tuple(shards), seed, "homogeneous")


def largest_remainder(proportions, total):
    """Integer counts summing to ``total`` that follow ``proportions``."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        # stable order: larger fractional part first, ties to lower index
        order = np.lexsort((np.arange(len(p)), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def dirichlet_proportions(num_classes, clients, alpha, rng):
    """Per-class client proportions, one Dir_J(alpha) draw per class."""
    return rng.dirichlet(np.full(clients, float(alpha)), size=num_classes)


def partition_dirichlet(dataset, clients, alpha=0.5, seed=0):
    """Heterogeneous split: class k is divided among clients by ``p_k ~ Dir_J(alpha)``."""
    _check_clients(clients)
    if not alpha > 0:
        raise ConfigError("must be positive", "alpha")
    rng = np.random.default_rng(seed)
    members = _class_members(dataset.labels, rng, dataset.num_classes)
    props = dirichlet_proportions(len(members), clients, alpha, rng)
    shards = [[] for _ in range(clients)]
    for k, idx in enumerate(members):
        counts = largest_remainder(props[k], len(idx))
        for j, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            shards[j].extend(chunk.tolist())
    return PartitionPlan(clients, tuple(shards), seed, f"dirichlet:{alpha}", proportions=props)


def data_efficiency_plan(dataset, groups=5, subgroups=5, alpha=0.5, seed=0):
    """Staged plans: ``groups`` homogeneous pieces, each split into Dirichlet sub-pieces.

    Stage ``t`` (1-based) exposes the ``subgroups * t`` clients of the first
    ``t`` pieces, pieces taken in a seeded random order.
    """
    rng = np.random.default_rng(seed)
    pieces = partition_homogeneous(dataset, groups, seed=int(rng.integers(2**31)))
    order = rng.permutation(groups)
    piece_clients = []
    for g in order:
        idx = pieces.indices[g]
        sub = partition_dirichlet(dataset.subset(idx), subgroups, alpha, seed=int(rng.integers(2**31)))
        piece_clients.append([idx[s] for s in sub.indices])
    stages = []
    for t in range(1, groups + 1):
        shards = [c for piece in piece_clients[:t] for c in piece]
        stages.append(PartitionPlan(len(shards), tuple(shards), seed, f"data-efficiency:{t}"))
    return stages
