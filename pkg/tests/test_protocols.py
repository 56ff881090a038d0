import math

import numpy as np
import pytest

from conftest import max_abs_diff, params_equal
from fedma.data import Dataset, partition_dirichlet, synth_images
from fedma.errors import ConfigError, DimensionError
from fedma.matching import MatchConfig
from fedma.nn import NetworkModel, forward, lenet, mlp, small_cnn
from fedma.nn.layers import Dense
from fedma.nn.training import SgdConfig
from fedma.permutation import permute_network, random_perms
from fedma.protocols import (
    ClientState,
    RoundReport,
    account_message,
    ensemble_eval,
    equivalent_fedavg_rounds,
    fedavg_aggregate,
    fedavg_round,
    fedma_pass,
    fedma_with_comm,
    fedprox_round,
    match_networks,
    read_reports,
    reconstruct_local,
    run_fedavg,
    weighted_last_layer,
    write_reports,
)

FAST = SgdConfig(epochs=1, batch_size=32)
FROZEN = SgdConfig(epochs=1, learning_rate=1e-12, last_layer_lr=1e-12, momentum=0.0, weight_decay=0.0)


@pytest.fixture(scope="module")
def images():
    full = synth_images(4, 400, seed=3)
    return full.subset(np.arange(300)), full.subset(np.arange(300, 400))


def shards(train, j, seed=0):
    plan = partition_dirichlet(train, j, 0.5, seed)
    return [train.subset(idx) for idx in plan.indices]


def client_set(train, j, seed=0):
    return [ClientState(k, small_cnn(4, seed=seed + k), s) for k, s in enumerate(shards(train, j, seed))]


def linear(weight, bias):
    layer = Dense(len(weight), len(bias), "identity")
    return NetworkModel([layer], [{"weight": np.asarray(weight, float), "bias": np.asarray(bias, float)}],
                        (len(weight),))


# ---------------------------------------------------------------- records

def test_client_state_counts(images):
    c = ClientState(0, small_cnn(4), images[0])
    assert c.data_size == int(c.class_counts.sum()) == 300
    assert c.class_counts.shape == (4,)


def test_reports_round_trip(tmp_path):
    reports = [RoundReport(1, "fedma", math.nan, 10, 20, 30, 1.0),
               RoundReport(2, "fedma", 0.125, 1, 2, 3, 1.5)]
    write_reports(reports, tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        assert fh.readline().strip() == "round,strategy,accuracy,bytes_up,bytes_down,global_params,growth_rate"
    back = read_reports(tmp_path / "r.csv")
    assert math.isnan(back[0].accuracy) and back[1] == reports[1]


# ---------------------------------------------------------------- accounting

def test_lenet_message_size():
    assert account_message(lenet()) == 8 * 431_080 == 3_448_640


def test_accounting_additivity():
    model = lenet()
    assert account_message(None) == 0 and account_message([]) == 0
    assert sum(account_message(p) for p in model.params) == account_message(model)
    assert account_message([model, model]) == 2 * account_message(model)


# ---------------------------------------------------------------- last layer

def last_layer_models(rng, j=2, k=4):
    return [linear(rng.normal(size=(3, k)), rng.normal(size=k)) for _ in range(j)]


def test_weighted_last_layer_equal_counts():
    models = last_layer_models(np.random.default_rng(0))
    _, p = weighted_last_layer(models, [[5, 5, 5, 5], [5, 5, 5, 5]])
    np.testing.assert_allclose(p["weight"], (models[0].params[0]["weight"] + models[1].params[0]["weight"]) / 2)


def test_weighted_last_layer_owner_and_blend():
    models = last_layer_models(np.random.default_rng(1))
    w0, w1 = models[0].params[0]["weight"], models[1].params[0]["weight"]
    b0, b1 = models[0].params[0]["bias"], models[1].params[0]["bias"]
    _, p = weighted_last_layer(models, [[3, 0, 1, 0], [1, 7, 1, 0]])
    np.testing.assert_allclose(p["weight"][:, 0], 0.75 * w0[:, 0] + 0.25 * w1[:, 0], atol=1e-15)
    np.testing.assert_array_equal(p["weight"][:, 1], w1[:, 1])
    np.testing.assert_allclose(p["weight"][:, 2], 0.5 * (w0[:, 2] + w1[:, 2]), atol=1e-15)
    np.testing.assert_allclose(p["weight"][:, 3], 0.5 * (w0[:, 3] + w1[:, 3]), atol=1e-15)
    assert p["bias"][0] == pytest.approx(0.75 * b0[0] + 0.25 * b1[0], abs=1e-15)


def test_weighted_last_layer_shape_errors():
    models = last_layer_models(np.random.default_rng(2))
    with pytest.raises(DimensionError):
        weighted_last_layer(models, [[1, 1, 1, 1]])
    with pytest.raises(DimensionError):
        weighted_last_layer([models[0], linear(np.zeros((5, 4)), np.zeros(4))], np.ones((2, 4)))


# ---------------------------------------------------------------- FedAvg / FedProx

def test_fedavg_aggregate_examples():
    a = mlp(4, [5], 3, seed=1)
    assert params_equal(fedavg_aggregate([a, a.copy()], [7, 7]), a)
    neg = NetworkModel(a.layers, [{k: -v for k, v in p.items()} for p in a.params], a.input_shape)
    zero = fedavg_aggregate([a, neg], [10, 10])
    assert all(np.all(v == 0) for p in zero.params for v in p.values())
    b = mlp(4, [5], 3, seed=2)
    mix = fedavg_aggregate([a, b], [30, 10])
    for pa, pb, pm in zip(a.params, b.params, mix.params):
        for k in pa:
            np.testing.assert_allclose(pm[k], 0.75 * pa[k] + 0.25 * pb[k], atol=1e-15)
    with pytest.raises(DimensionError):
        fedavg_aggregate([a, mlp(4, [6], 3)], [1, 1])


def test_fedprox_zero_mu_is_fedavg(images):
    clients = client_set(images[0], 3)
    g1, c1 = fedavg_round(clients, None, FAST)
    g2, c2 = fedprox_round(clients, None, 0.0, FAST)
    assert params_equal(g1, g2)
    h1, _ = fedavg_round(c1, g1, FAST, round_index=1)
    h2, _ = fedprox_round(c2, g2, 0.0, FAST, round_index=1)
    assert params_equal(h1, h2)


def test_fedprox_huge_mu_keeps_global(images):
    clients = client_set(images[0], 2)
    g, _ = fedavg_round(clients, None, FAST)
    h, _ = fedprox_round(clients, g, 1e6, FAST)
    assert max(max_abs_diff(p[k], q[k]) for p, q in zip(g.params, h.params) for k in p) < 1e-3


def test_fedavg_single_client_fixed_point(images):
    c = ClientState(0, small_cnn(4), images[0])
    g, _ = fedavg_round([c], train=False)
    assert params_equal(g, c.model)
    g, trained = fedavg_round([c], None, FAST)
    assert params_equal(g, trained[0].model)


def test_run_fedavg_reports(images):
    clients = client_set(images[0], 2)
    g, reports = run_fedavg(clients, 2, FAST, test_set=images[1])
    assert [r.round for r in reports] == [1, 2]
    full = account_message(g)
    for r in reports:
        assert r.bytes_up == r.bytes_down == 2 * full and r.growth_rate == 1.0
        assert 0 <= r.accuracy <= 1
    with pytest.raises(ConfigError):
        run_fedavg(clients, 0, FAST)


# ---------------------------------------------------------------- ensemble

def test_ensemble_identical_models(images):
    m = small_cnn(4, seed=5)
    from fedma.nn import evaluate
    assert ensemble_eval([m, m, m], images[1]) == evaluate(m, images[1])


def test_ensemble_tie_goes_to_lowest_class():
    data = Dataset(np.zeros((3, 2)), np.array([0, 0, 1]), 2)
    a = linear(np.zeros((2, 2)), [1.0, 0.0])
    b = linear(np.zeros((2, 2)), [0.0, 1.0])
    assert ensemble_eval([a, b], data) == pytest.approx(2 / 3)


def test_ensemble_averages_probabilities_not_votes():
    # two models lean weakly to class 0, one is sure of class 1
    data = Dataset(np.zeros((1, 2)), np.array([1]), 3)
    weak = linear(np.zeros((2, 3)), np.log([0.5, 0.4, 0.1]))
    sure = linear(np.zeros((2, 3)), np.log([1e-6, 1.0 - 2e-6, 1e-6]))
    probs = np.mean([[0.5, 0.4, 0.1], [0.5, 0.4, 0.1], [1e-6, 1 - 2e-6, 1e-6]], axis=0)
    assert int(np.argmax(probs)) == 1
    assert ensemble_eval([weak, weak, sure], data) == 1.0
    assert ensemble_eval([weak, weak], data) == 0.0


# ---------------------------------------------------------------- FedMA

def test_match_networks_single_client_identity():
    m = small_cnn(4, seed=1)
    g, assignments = match_networks([m])
    assert params_equal(g, m)
    assert all(a[0].is_identity for a in assignments)


@pytest.mark.parametrize("mode", ["euclidean", "bbp"])
def test_permuted_clones_without_retraining(images, mode):
    base = small_cnn(4, seed=2)
    rng = np.random.default_rng(0)
    clients = [ClientState(j, base if j == 0 else permute_network(base, random_perms(base, rng)), images[0])
               for j in range(3)]
    result = fedma_pass(clients, MatchConfig(cost_mode=mode, epsilon=1e6), retrain=False)
    assert result.growth_rate == 1.0
    assert max_abs_diff(forward(result.global_model, images[1].features), forward(base, images[1].features)) < 1e-8
    for j, c in enumerate(clients):
        local = reconstruct_local(result.global_model, [a[j] for a in result.assignments])
        x = images[1].features[:20]
        assert max_abs_diff(forward(local, x), forward(c.model, x)) < 1e-8


def test_fedma_single_client_fixed_point(images):
    c = ClientState(0, small_cnn(4, seed=3), images[0])
    result = fedma_pass([c], sgd_cfg=FAST, test_set=images[1])
    assert params_equal(result.global_model, result.clients[0].model)
    still = fedma_pass([c], retrain=False)
    assert params_equal(still.global_model, c.model)


def test_fedma_pass_rounds_and_bytes(images):
    clients = client_set(images[0], 3)
    result = fedma_pass(clients, sgd_cfg=FAST, test_set=images[1])
    depth = clients[0].model.depth
    assert [r.round for r in result.reports] == list(range(1, depth + 1))
    assert all(math.isnan(r.accuracy) for r in result.reports[:-1])
    assert 0 <= result.reports[-1].accuracy <= 1
    g = result.global_model
    for n, (r, rec) in enumerate(zip(result.reports, result.layers), start=1):
        pos = clients[0].model.position(n)
        assert r.bytes_up == sum(8 * sum(v.size for v in c.model.params[pos].values()) for c in clients)
        assert r.bytes_down == 3 * 8 * sum(v.size for v in g.params[g.position(n)].values())
        assert rec.bytes_up == r.bytes_up
    assert result.growth_rate == g.param_count() / clients[0].model.param_count()
    for n, per_client in enumerate(result.assignments, start=1):
        width = g.layers[g.position(n)].out_units
        assert max(c.model.layers[c.model.position(n)].out_units for c in clients) <= width
        assert width <= sum(c.model.layers[c.model.position(n)].out_units for c in clients)
        assert all(a.global_size == width for a in per_client)


def test_lenet_pass_reports_four_rounds(mnist_2k):
    train, test = mnist_2k
    small = train.subset(np.arange(0, 2000, 20))
    clients = [ClientState(j, lenet(seed=j), s) for j, s in enumerate(shards(small, 2))]
    result = fedma_pass(clients, sgd_cfg=FAST, test_set=test.subset(np.arange(200)))
    assert len(result.reports) == 4
    assert sum(r.bytes_up for r in result.reports) == sum(account_message(c.model) for c in clients)


def test_mismatched_architectures_rejected(images):
    a = ClientState(0, small_cnn(4), images[0])
    b = ClientState(1, mlp(192, [10], 4), Dataset(images[0].features.reshape(300, -1), images[0].labels, 4))
    with pytest.raises(DimensionError):
        fedma_pass([a, b], retrain=False)


def test_comm_single_round_is_one_pass(images):
    clients = client_set(images[0], 2)
    cfg = MatchConfig(cost_mode="euclidean", epsilon=5.0)
    one, reports = fedma_with_comm(clients, 1, cfg, FAST, images[1])
    ref = fedma_pass(clients, cfg, FAST, test_set=images[1], pass_index=1, strategy="fedma-comm")
    assert params_equal(one.global_model, ref.global_model)
    assert reports == ref.reports


def test_comm_clones_stay_at_original_size(images):
    base = small_cnn(4, seed=4)
    rng = np.random.default_rng(1)
    clients = [ClientState(j, permute_network(base, random_perms(base, rng)), images[0]) for j in range(2)]
    seen = []
    result, reports = fedma_with_comm(clients, 2, MatchConfig(), FROZEN, images[1], on_pass=seen.append)
    assert len(reports) == 2 * base.depth and [len(s) for s in seen] == [base.depth] * 2
    assert [r.round for r in reports] == list(range(1, 2 * base.depth + 1))
    assert all(r.growth_rate == 1.0 for r in reports[base.depth - 1::base.depth])
    assert max_abs_diff(forward(result.global_model, images[1].features), forward(base, images[1].features)) < 1e-6


def test_equivalent_round_budget():
    assert equivalent_fedavg_rounds(11, 9) == 99
    assert equivalent_fedavg_rounds(11, 3) == 33
