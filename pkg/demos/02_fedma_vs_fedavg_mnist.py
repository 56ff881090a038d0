"""FedMA against one-round FedAvg on a 2,000-image MNIST subset.

Five clients with Dirichlet(0.5) label skew each train a LeNet for ten
epochs.  The same local models are then combined by weighted averaging and
by one FedMA pass (four rounds, one per layer).  Run
00_prepare_mnist_subset.py first; takes about a minute.

    FEDMA_DATA_DIR=data/mnist-5k python3 demos/02_fedma_vs_fedavg_mnist.py [seed]
"""
import sys

from fedma.data import load_mnist, partition_dirichlet
from fedma.matching import MatchConfig
from fedma.nn import evaluate, lenet
from fedma.nn.training import SgdConfig
from fedma.protocols import ClientState, ensemble_eval, fedavg_aggregate, fedma_pass, train_clients

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
train, test = load_mnist("train"), load_mnist("test")
plan = partition_dirichlet(train, 5, 0.5, seed=seed)
print("client sizes:", plan.sizes())
print("class counts per client:\n", plan.histograms(train.labels, 10))

cfg = SgdConfig(epochs=10, seed=seed)
clients = [ClientState(j, lenet(seed=seed * 100 + j), train.subset(idx)) for j, idx in enumerate(plan.indices)]
clients = train_clients(clients, cfg)
print("local accuracies:", [round(evaluate(c.model, test), 3) for c in clients])
print("ensemble:", round(ensemble_eval(clients, test), 4))

avg = fedavg_aggregate([c.model for c in clients], [c.data_size for c in clients])
print("one-round FedAvg:", round(evaluate(avg, test), 4))

result = fedma_pass(clients, MatchConfig(), cfg, test_set=test)
for r in result.reports:
    print(f"  round {r.round}: up {r.bytes_up:>9d} B, down {r.bytes_down:>9d} B, growth {r.growth_rate:.3f}")
print("FedMA:", round(result.reports[-1].accuracy, 4))
