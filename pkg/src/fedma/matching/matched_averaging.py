"""Matched averaging with an adaptively sized global layer.

Client neurons are matched one client at a time against the current global
atoms.  The cost matrix has one column per existing atom plus one "new atom"
column per local neuron; a neuron whose best match is dearer than opening a
new atom becomes an atom of its own.

Two cost modes are provided:

``euclidean``
    Existing atom ``i`` with ``n_i`` members and mean ``theta_i`` costs
    ``n_i / (n_i + 1) * ||w - theta_i||^2``, the exact increase in the
    within-atom sum of squares when ``w`` joins.  New atom number ``r`` costs
    ``epsilon + kappa * r``.

``bbp``
    Gaussian posterior-predictive MAP cost under a zero-mean prior with
    variance ``sigma0_sq`` and observation variance ``sigma_sq``; popular
    atoms get a ``-log n_i`` bonus and new atoms pay ``-log(gamma0 / J)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DimensionError
from ..permutation import Assignment, layer_from_neurons
from .hungarian import linear_assignment

COST_MODES = ("euclidean", "bbp")


@dataclass(frozen=True)
class MatchConfig:
    cost_mode: str = "bbp"
    epsilon: float = 1.0
    kappa: float = 0.0
    gamma0: float = 7.0
    sigma0_sq: float = 1.0
    sigma_sq: float = 1.0
    passes: int = 1
    client_order_seed: int | None = 0

    def __post_init__(self):
        if self.cost_mode not in COST_MODES:
            raise ConfigError(f"must be one of {COST_MODES}", "cost_mode")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConfigError("must be finite and >= 0", "epsilon")
        if self.kappa < 0:
            raise ConfigError("must be >= 0", "kappa")
        for key in ("gamma0", "sigma0_sq", "sigma_sq"):
            if not getattr(self, key) > 0:
                raise ConfigError("must be positive", key)
        if int(self.passes) != self.passes or self.passes < 1:
            raise ConfigError("must be an integer >= 1", "passes")


@dataclass(frozen=True, eq=False)
class GlobalAtoms:
    """Running state of the global layer: per-atom sums and member counts."""

    sums: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        if len(self.sums) != len(self.counts):
            raise DimensionError("one count per atom is required")

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))

    @property
    def size(self):
        return len(self.counts)

    @property
    def dim(self):
        return self.sums.shape[1]

    def means(self):
        return self.sums / self.counts[:, None]

    def posterior(self, cfg):
        """Posterior mean and variance of each atom under the Gaussian prior."""
        precision = 1.0 / cfg.sigma0_sq + self.counts / cfg.sigma_sq
        var = 1.0 / precision
        return (self.sums / cfg.sigma_sq) * var[:, None], var

    def centers(self, cfg):
        """Atom locations used for matching in ``cfg.cost_mode``."""
        if cfg.cost_mode == "bbp":
            return self.posterior(cfg)[0]
        return self.means()


@dataclass
class MatchStats:
    cost_entries: int = 0
    hungarian_cells: int = 0
    solves: int = 0


def _sq_distances(x, y):
    """Pairwise squared distances, exact differences for small problems."""
    if len(y) == 0:
        return np.zeros((len(x), 0))
    if x.shape[0] * y.shape[0] * x.shape[1] <= 20_000_000:
        out = np.empty((len(x), len(y)))
        step = max(1, 20_000_000 // max(1, y.shape[0] * x.shape[1]))
        for s in range(0, len(x), step):
            d = x[s:s + step, None, :] - y[None, :, :]
            out[s:s + step] = np.einsum("ijk,ijk->ij", d, d)
        return out
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def build_extended_cost(bundle, atoms, cfg, num_clients=1, stats=None):
    """The ``L_j x (L + L_j)`` cost matrix of one client against the global atoms."""
    w = bundle.vectors if hasattr(bundle, "vectors") else np.asarray(bundle)
    lj, dim = w.shape
    if atoms.size and atoms.dim != dim:
        raise DimensionError(f"neurons have dimension {dim}, atoms {atoms.dim}")
    big_l = atoms.size
    if stats is not None:
        stats.cost_entries += dim * lj * (big_l + lj)
    if cfg.cost_mode == "euclidean":
        existing = _sq_distances(w, atoms.means()) * (atoms.counts / (atoms.counts + 1.0))[None, :]
        new = cfg.epsilon + cfg.kappa * np.arange(1, lj + 1)
        new = np.broadcast_to(new, (lj, lj))
    else:
        mean, var = atoms.posterior(cfg)
        spread = var + cfg.sigma_sq
        existing = (_sq_distances(w, mean) / (2.0 * spread)[None, :]
                    + 0.5 * dim * np.log(spread)[None, :] - np.log(atoms.counts)[None, :])
        s0 = cfg.sigma0_sq + cfg.sigma_sq
        per_row = ((w * w).sum(1) / (2.0 * s0) + 0.5 * dim * math.log(s0)
                   - math.log(cfg.gamma0 / num_clients))
        new = np.broadcast_to(per_row[:, None], (lj, lj))
    return np.hstack([existing, new])


@dataclass(frozen=True, eq=False)
class ClientMatch:
    assignment: Assignment
    atoms: GlobalAtoms
    row_costs: np.ndarray
    total_cost: float
    new_atoms: int


def match_client(atoms, bundle, cfg, num_clients=1, stats=None):
    """Match one client's neurons into the atoms; returns a :class:`ClientMatch`."""
    w = bundle.vectors if hasattr(bundle, "vectors") else np.asarray(bundle)
    if atoms.size == 0:
        atoms = GlobalAtoms.empty(w.shape[1])
    cost = build_extended_cost(w, atoms, cfg, num_clients, stats)
    cols, total = linear_assignment(cost)
    if stats is not None:
        stats.solves += 1
        stats.hungarian_cells += cost.size
    big_l = atoms.size
    spawned = np.flatnonzero(cols >= big_l)
    # compaction: new atoms numbered in the order of the local neurons that opened them
    mapping = cols.copy()
    mapping[spawned] = big_l + np.arange(len(spawned))
    size = big_l + len(spawned)
    sums = np.vstack([atoms.sums, np.zeros((len(spawned), w.shape[1]))])
    counts = np.concatenate([atoms.counts, np.zeros(len(spawned), dtype=np.int64)])
    sums[mapping] += w
    counts[mapping] += 1
    return ClientMatch(Assignment(mapping, size), GlobalAtoms(sums, counts),
                       cost[np.arange(len(cols)), cols], total, len(spawned))


@dataclass
class MatchResult:
    atoms: GlobalAtoms
    assignments: list
    row_costs: list
    order: list
    objective_history: list = field(default_factory=list)
    stats: MatchStats = field(default_factory=MatchStats)

    @property
    def global_size(self):
        return self.atoms.size

    def to_csv(self, path):
        """Assignment dump with columns client, local_index, global_index, cost."""
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["client", "local_index", "global_index", "cost"])
            for j, (a, costs) in enumerate(zip(self.assignments, self.row_costs)):
                for l, (g, c) in enumerate(zip(a.mapping, costs)):
                    out.writerow([j, l, int(g), repr(float(c))])

    def atoms_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["global_index", "count"] + [f"x{k}" for k in range(self.atoms.dim)])
            for i, (n, row) in enumerate(zip(self.atoms.counts, self.atoms.means())):
                out.writerow([i, int(n)] + [repr(float(v)) for v in row])


def _client_order(count, cfg):
    if cfg.client_order_seed is None:
        return list(range(count))
    return [int(i) for i in np.random.default_rng(cfg.client_order_seed).permutation(count)]


def _remove_client(atoms, assignments, j, vectors):
    """Take client ``j`` out of the atoms, dropping atoms left empty."""
    a = assignments[j]
    sums = atoms.sums.copy()
    counts = atoms.counts.copy()
    sums[a.mapping] -= vectors
    counts[a.mapping] -= 1
    keep = counts > 0
    renumber = np.cumsum(keep) - 1
    size = int(keep.sum())
    for k, other in enumerate(assignments):
        if other is None or k == j:
            continue
        assignments[k] = Assignment(renumber[other.mapping], size)
    assignments[j] = None
    return GlobalAtoms(sums[keep], counts[keep])


def _rebuild_sums(atoms, assignments, bundles):
    # recompute sums from members so repeated add/remove cannot drift
    sums = np.zeros_like(atoms.sums)
    for a, b in zip(assignments, bundles):
        if a is not None:
            sums[a.mapping] += b.vectors
    return GlobalAtoms(sums, atoms.counts)


def matched_average(bundles, cfg=None):
    """Iterative matched averaging of per-client neuron bundles.

    The first sweep inserts clients one by one (in a seeded order).  Each
    further sweep removes a client, re-matches it against the others and puts
    it back.
    """
    cfg = cfg or MatchConfig()
    bundles = list(bundles)
    if not bundles:
        raise ConfigError("at least one client is required", "clients")
    dims = {b.dim for b in bundles}
    if len(dims) != 1:
        raise DimensionError(f"clients disagree on neuron dimension: {sorted(dims)}")
    J = len(bundles)
    order = _client_order(J, cfg)
    stats = MatchStats()
    atoms = GlobalAtoms.empty(dims.pop())
    assignments = [None] * J
    row_costs = [None] * J
    for j in order:
        m = match_client(atoms, bundles[j], cfg, J, stats)
        atoms, assignments[j], row_costs[j] = m.atoms, m.assignment, m.row_costs
    _finalize(assignments, atoms)
    history = [objective_value(atoms, assignments, bundles, cfg)]
    for _ in range(cfg.passes - 1):
        for j in order:
            atoms = _remove_client(atoms, assignments, j, bundles[j].vectors)
            atoms = _rebuild_sums(atoms, assignments, bundles)
            m = match_client(atoms, bundles[j], cfg, J, stats)
            atoms, assignments[j], row_costs[j] = m.atoms, m.assignment, m.row_costs
            _finalize(assignments, atoms)
        atoms = _rebuild_sums(atoms, assignments, bundles)
        history.append(objective_value(atoms, assignments, bundles, cfg))
    return MatchResult(atoms, assignments, row_costs, order, history, stats)


def _finalize(assignments, atoms):
    for k, a in enumerate(assignments):
        if a is not None and a.global_size != atoms.size:
            assignments[k] = Assignment(a.mapping, atoms.size)


def objective_value(atoms, assignments, bundles, cfg=None):
    """Within-atom sum of squared distances plus ``epsilon`` per surplus atom.

    Surplus atoms are those beyond the widest client, so the value is the
    plain sum of squares whenever the global layer did not grow.
    """
    means = atoms.means()
    total = 0.0
    for a, b in zip(assignments, bundles):
        d = b.vectors - means[a.mapping]
        total += float(np.sum(d * d))
    if cfg is not None and cfg.cost_mode == "euclidean":
        total += cfg.epsilon * (atoms.size - max(b.size for b in bundles))
    return total


def average_layer(atoms, assignments, bundles):
    """Global layer from matched neurons: each slot is the mean of its contributors.

    Returns ``(layer, params)`` sized to the global layer.  LSTM hidden-to-hidden
    weights are carried into global coordinates on both axes before averaging.
    """
    counts = np.zeros(atoms.size, dtype=np.int64)
    sums = np.zeros((atoms.size, bundles[0].dim))
    for a, b in zip(assignments, bundles):
        if a.global_size != atoms.size:
            raise DimensionError("assignment does not match the atom count")
        sums[a.mapping] += b.vectors
        counts[a.mapping] += 1
    assert np.all(counts > 0), "every atom has at least one contributor"
    vectors = sums / counts[:, None]
    recurrent = None
    if bundles[0].recurrent is not None:
        gates = bundles[0].recurrent.shape[1]
        acc = np.zeros((atoms.size, gates, atoms.size))
        for a, b in zip(assignments, bundles):
            m = a.mapping
            acc[np.ix_(m, np.arange(gates), m)] += b.recurrent
        recurrent = acc / counts[:, None, None]
    return layer_from_neurons(bundles[0].layer, vectors, recurrent)
