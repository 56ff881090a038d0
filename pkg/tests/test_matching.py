import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import max_abs_diff
from fedma.errors import ConfigError, DimensionError
from fedma.matching import (
    GlobalAtoms,
    MatchConfig,
    average_layer,
    build_extended_cost,
    match_client,
    matched_average,
    objective_value,
)
from fedma.nn import forward, mlp
from fedma.nn.layers import Dense
from fedma.permutation import Assignment, NeuronBundle, permute_network, random_perms
from fedma.protocols import match_networks

EUCLID = MatchConfig(cost_mode="euclidean", epsilon=1.0, client_order_seed=None)


def bundle(rows, client=0):
    rows = np.asarray(rows, dtype=float)
    return NeuronBundle(rows, Dense(rows.shape[1] - 1, rows.shape[0]), client)


def atoms_of(rows, counts=None):
    rows = np.asarray(rows, dtype=float)
    counts = np.ones(len(rows), dtype=np.int64) if counts is None else np.asarray(counts)
    return GlobalAtoms(rows * counts[:, None], counts)


# ---------------------------------------------------------------- extended cost

def test_new_atom_columns_follow_epsilon_and_slope():
    cfg = MatchConfig(cost_mode="euclidean", epsilon=10.0, kappa=0.1)
    cost = build_extended_cost(bundle([[1.0, 2.0], [3.0, 4.0]]), atoms_of([[0, 0], [1, 1]]), cfg)
    assert cost.shape == (2, 4)
    np.testing.assert_allclose(cost[:, 2:], [[10.1, 10.2], [10.1, 10.2]], rtol=0, atol=1e-12)


def test_exact_match_costs_nothing():
    cost = build_extended_cost(bundle([[0.5, -2.0]]), atoms_of([[0.5, -2.0], [9, 9]]), EUCLID)
    assert cost[0, 0] == 0.0


def test_euclidean_existing_cost_is_sse_increase():
    # atom of two members {0, 2} (mean 1); adding w = 4 raises the SSE from 2 to 8
    atoms = GlobalAtoms(np.array([[2.0]]), np.array([2]))
    cost = build_extended_cost(np.array([[4.0]]), atoms, EUCLID)
    assert cost[0, 0] == pytest.approx(6.0, abs=1e-12)


def test_bbp_popular_atom_is_cheaper():
    cfg = MatchConfig(cost_mode="bbp")
    atoms = GlobalAtoms(np.zeros((2, 2)), np.array([3, 1]))
    w = np.array([[1.0, 0.0]])
    cost = build_extended_cost(w, atoms, cfg, num_clients=2)
    assert cost[0, 0] < cost[0, 1]
    # hand evaluation, sigma0_sq = sigma_sq = 1: v_0 = 1/4, v_1 = 1/2, both means 0
    assert cost[0, 0] == pytest.approx(1 / 2.5 + math.log(1.25) - math.log(3), abs=1e-12)
    assert cost[0, 1] == pytest.approx(1 / 3.0 + math.log(1.5), abs=1e-12)
    assert cost[0, 2] == pytest.approx(1 / 4.0 + math.log(2.0) - math.log(7 / 2), abs=1e-12)


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        build_extended_cost(bundle([[1.0, 2.0, 3.0]]), atoms_of([[0, 0]]), EUCLID)
    with pytest.raises(DimensionError):
        matched_average([bundle([[1.0, 2.0]]), bundle([[1.0, 2.0, 3.0]])], EUCLID)


def test_config_validation():
    for bad in ({"cost_mode": "cosine"}, {"epsilon": -1}, {"kappa": -0.5}, {"gamma0": 0},
                {"sigma0_sq": 0}, {"sigma_sq": -1}, {"passes": 0}, {"passes": 1.5}):
        with pytest.raises(ConfigError):
            MatchConfig(**bad)


# ---------------------------------------------------------------- match_client

def test_empty_atoms_spawn_everything():
    rows = np.random.default_rng(0).normal(size=(4, 3))
    m = match_client(GlobalAtoms.empty(3), bundle(rows), EUCLID)
    assert m.atoms.size == 4 and m.new_atoms == 4
    assert m.assignment.mapping.tolist() == [0, 1, 2, 3]
    np.testing.assert_array_equal(m.atoms.means(), rows)


def test_identical_bundle_matches_existing_atoms():
    rows = np.random.default_rng(1).normal(size=(5, 4))
    perm = np.array([3, 0, 4, 1, 2])
    cfg = MatchConfig(cost_mode="euclidean", epsilon=1e6)
    m = match_client(atoms_of(rows), bundle(rows[perm]), cfg)
    assert m.atoms.size == 5 and m.new_atoms == 0
    assert m.assignment.mapping.tolist() == perm.tolist()
    assert m.atoms.counts.tolist() == [2] * 5


def two_clusters(separation, seed=0, sizes=(3, 4)):
    rng = np.random.default_rng(seed)
    a = rng.normal(scale=0.01, size=(sizes[0], 3))
    b = rng.normal(scale=0.01, size=(sizes[1], 3)) + separation
    return bundle(a, 0), bundle(b, 1)


def test_far_clusters_stay_apart():
    b1, b2 = two_clusters(100.0)
    res = matched_average([b1, b2], EUCLID)
    assert res.global_size == b1.size + b2.size


def test_near_clusters_merge():
    b1, b2 = two_clusters(0.0)
    cfg = MatchConfig(cost_mode="euclidean", epsilon=100.0, client_order_seed=None)
    res = matched_average([b1, b2], cfg)
    assert res.global_size == max(b1.size, b2.size)


def test_compaction_numbers_new_atoms_in_local_order():
    atoms = atoms_of([[0.0, 0.0]])
    w = np.array([[50.0, 0.0], [0.0, 0.0], [-50.0, 0.0]])
    m = match_client(atoms, w, EUCLID)
    assert m.assignment.mapping.tolist() == [1, 0, 2]


# ---------------------------------------------------------------- matched_average

def test_single_client_is_identity():
    rows = np.random.default_rng(2).normal(size=(6, 5))
    res = matched_average([bundle(rows)], MatchConfig())
    assert res.assignments[0].is_identity
    np.testing.assert_array_equal(res.atoms.means(), rows)


def test_identical_clients_share_atoms():
    rows = np.random.default_rng(3).normal(size=(6, 5))
    res = matched_average([bundle(rows, j) for j in range(3)], MatchConfig(cost_mode="euclidean"))
    assert res.atoms.counts.tolist() == [3] * 6
    np.testing.assert_allclose(res.atoms.means(), rows, atol=1e-15)


@pytest.mark.parametrize("mode", ["euclidean", "bbp"])
def test_permuted_clone_recovers_rows(mode):
    rng = np.random.default_rng(4)
    # BBP only prefers an existing atom once the neuron dimension is large enough
    rows = rng.normal(scale=0.3, size=(8, 30))
    perm = rng.permutation(8)
    cfg = MatchConfig(cost_mode=mode, epsilon=1e6)
    res = matched_average([bundle(rows), bundle(rows[perm], 1)], cfg)
    assert res.global_size == 8
    got = sorted(map(tuple, np.round(res.atoms.means(), 12)))
    assert got == sorted(map(tuple, np.round(rows, 12)))


def test_clone_network_forward_equivalent():
    rng = np.random.default_rng(5)
    model = mlp(29, [9, 6], 3, seed=0)
    clone = permute_network(model, random_perms(model, rng))
    for mode in ("euclidean", "bbp"):
        global_model, _ = match_networks([model, clone], MatchConfig(cost_mode=mode, epsilon=1e6))
        assert global_model.param_count() == model.param_count()
        x = rng.normal(size=(20, 29))
        assert max_abs_diff(forward(global_model, x), forward(model, x)) < 1e-8


def test_average_layer_examples():
    w, w2 = np.array([[1.0, 2.0, 0.5]]), np.array([[3.0, -2.0, 1.5]])
    one = Assignment.identity(1)
    atoms = GlobalAtoms(w + w2, np.array([2]))
    layer, params = average_layer(atoms, [one, one], [bundle(w), bundle(w2, 1)])
    np.testing.assert_allclose(params["weight"], [[2.0], [0.0]])
    np.testing.assert_allclose(params["bias"], [1.0])
    layer, params = average_layer(atoms_of(w), [one], [bundle(w)])
    np.testing.assert_array_equal(params["weight"], [[1.0], [2.0]])


def test_average_layer_counts_only_contributors():
    # slot 1 is reached by client 1 alone, so it keeps that neuron unchanged
    w = np.array([[1.0, 1.0]])
    w2 = np.array([[3.0, 3.0], [7.0, -1.0]])
    a = [Assignment(np.array([0]), 2), Assignment(np.array([0, 1]), 2)]
    atoms = GlobalAtoms(np.array([[4.0, 4.0], [7.0, -1.0]]), np.array([2, 1]))
    _, params = average_layer(atoms, a, [bundle(w), bundle(w2, 1)])
    np.testing.assert_allclose(params["weight"], [[2.0, 7.0]])
    np.testing.assert_allclose(params["bias"], [2.0, -1.0])


def test_objective_examples():
    rows = np.random.default_rng(6).normal(size=(4, 3))
    res = matched_average([bundle(rows), bundle(rows, 1)], EUCLID)
    assert objective_value(res.atoms, res.assignments, [bundle(rows), bundle(rows, 1)]) == pytest.approx(0, abs=1e-24)
    res = matched_average([bundle(rows)], EUCLID)
    assert objective_value(res.atoms, res.assignments, [bundle(rows)]) == 0.0
    # atom {(0,0),(2,0)} and atom {(5,5)}: squared distances 1 + 1 + 0
    bundles = [bundle([[0.0, 0.0], [5.0, 5.0]]), bundle([[2.0, 0.0]], 1)]
    a = [Assignment(np.array([0, 1]), 2), Assignment(np.array([0]), 2)]
    atoms = GlobalAtoms(np.array([[2.0, 0.0], [5.0, 5.0]]), np.array([2, 1]))
    assert objective_value(atoms, a, bundles) == 2.0
    assert objective_value(atoms, a, bundles, EUCLID) == 2.0


def test_csv_dumps(tmp_path):
    rows = np.random.default_rng(7).normal(size=(3, 2))
    res = matched_average([bundle(rows), bundle(rows[::-1], 1)], EUCLID)
    res.to_csv(tmp_path / "a.csv")
    res.atoms_to_csv(tmp_path / "b.csv")
    with open(tmp_path / "a.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["client", "local_index", "global_index", "cost"]
    assert len(table) == 1 + 6
    assert [int(r[2]) for r in table[4:]] == res.assignments[1].mapping.tolist()
    with open(tmp_path / "b.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["global_index", "count", "x0", "x1"]
    assert sum(int(r[1]) for r in table[1:]) == 6


# ---------------------------------------------------------------- properties

def reference_costs(w, sums, counts, eps):
    lj = len(w)
    cost = np.empty((lj, len(counts) + lj))
    for l in range(lj):
        for i in range(len(counts)):
            cost[l, i] = counts[i] / (counts[i] + 1) * np.sum((w[l] - sums[i] / counts[i]) ** 2)
        cost[l, len(counts):] = eps
    return cost


def exhaustive_sequence(bundles, eps):
    """Client-by-client exhaustive matching with an independent cost formula."""
    sums, counts, total = np.zeros((0, bundles[0].dim)), [], 0.0
    for b in bundles:
        cost = reference_costs(b.vectors, sums, counts, eps)
        best = min(itertools.permutations(range(cost.shape[1]), b.size),
                   key=lambda cols: sum(cost[l, c] for l, c in enumerate(cols)))
        total += sum(cost[l, c] for l, c in enumerate(best))
        opened = [c for c in best if c >= len(counts)]
        remap = {c: len(counts) + k for k, c in enumerate(opened)}
        sums = np.vstack([sums, np.zeros((len(opened), b.dim))])
        counts = list(counts) + [0] * len(opened)
        for l, c in enumerate(best):
            g = remap.get(c, c)
            sums[g] += b.vectors[l]
            counts[g] += 1
    return total, len(counts)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2**31 - 1))
def test_exhaustive_oracle(sizes, seed):
    rng = np.random.default_rng(seed)
    bundles = [bundle(rng.normal(size=(s, 2)), j) for j, s in enumerate(sizes)]
    res = matched_average(bundles, EUCLID)
    got = sum(float(c.sum()) for c in res.row_costs)
    want, size = exhaustive_sequence(bundles, EUCLID.epsilon)
    assert got <= want + 1e-9
    assert got == pytest.approx(want, abs=1e-9)
    assert res.global_size == size


def test_exhaustive_oracle_at_six_neurons():
    rng = np.random.default_rng(8)
    bundles = [bundle(rng.normal(size=(6, 2)), j) for j in range(2)]
    res = matched_average(bundles, EUCLID)
    want, _ = exhaustive_sequence(bundles, EUCLID.epsilon)
    assert sum(float(c.sum()) for c in res.row_costs) == pytest.approx(want, abs=1e-9)


instances = st.tuples(st.lists(st.integers(1, 7), min_size=1, max_size=5), st.integers(0, 2**31 - 1),
                      st.sampled_from(["euclidean", "bbp"]), st.floats(0.01, 20.0))


@settings(max_examples=60, deadline=None)
@given(instances)
def test_size_bounds(instance):
    sizes, seed, mode, eps = instance
    rng = np.random.default_rng(seed)
    bundles = [bundle(rng.normal(size=(s, 4)), j) for j, s in enumerate(sizes)]
    res = matched_average(bundles, MatchConfig(cost_mode=mode, epsilon=eps, passes=2))
    assert max(sizes) <= res.global_size <= sum(sizes)
    assert np.all(res.atoms.counts >= 1)
    for a, s in zip(res.assignments, sizes):
        assert a.local_size == s and a.global_size == res.global_size
        assert len(set(a.mapping.tolist())) == s


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(2, 8), min_size=2, max_size=5), st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_sweeps_never_increase_objective(sizes, seed, eps):
    rng = np.random.default_rng(seed)
    bundles = [bundle(rng.normal(size=(s, 3)), j) for j, s in enumerate(sizes)]
    res = matched_average(bundles, MatchConfig(cost_mode="euclidean", epsilon=eps, passes=5))
    hist = res.objective_history
    assert len(hist) == 5
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


@pytest.mark.parametrize("eps", [1e-6, 1e6])
def test_cost_build_scaling(eps):
    rng = np.random.default_rng(9)

    def entries(j):
        bundles = [bundle(rng.normal(size=(10, 6)), k) for k in range(j)]
        return matched_average(bundles, MatchConfig(cost_mode="euclidean", epsilon=eps)).stats
    for j in (2, 4, 8):
        small, big = entries(j), entries(2 * j)
        assert big.cost_entries <= 4.5 * small.cost_entries
        assert big.solves == 2 * small.solves
