"""Why plain averaging breaks and matching fixes it.

Two copies of one LeNet, the second with its hidden units shuffled, compute
exactly the same function.  Averaging them coordinate by coordinate mixes
unrelated units; matching first recovers the original network.
"""
import numpy as np

from fedma.matching import MatchConfig
from fedma.nn import forward, lenet
from fedma.permutation import permute_network, random_perms
from fedma.protocols import fedavg_aggregate, match_networks

rng = np.random.default_rng(0)
model = lenet(seed=0)
shuffled = permute_network(model, random_perms(model, rng))
x = rng.random((64, 1, 28, 28))

# %% the shuffled copy is the same function
print("max |f(x) - f_shuffled(x)|:", np.abs(forward(model, x) - forward(shuffled, x)).max())

# %% coordinate-wise averaging of the two copies
naive = fedavg_aggregate([model, shuffled], [1, 1])
print("naive average, max output change:", np.abs(forward(naive, x) - forward(model, x)).max())

# %% matched averaging, in both cost modes
for mode in ("euclidean", "bbp"):
    matched, assignments = match_networks([model, shuffled], MatchConfig(cost_mode=mode))
    err = np.abs(forward(matched, x) - forward(model, x)).max()
    print(f"{mode:9s} matched average, max output change: {err:.2e}, "
          f"growth {matched.param_count() / model.param_count():.3f}")

# the assignment for client 1 undoes the shuffle of the first layer
print("layer 1, client 1 -> global:", assignments[0][1].mapping[:10], "...")
