"""Domain bias: colour versus grayscale images held by different clients.

Synthetic tinted 8x8 images carry their class in a luminance pattern only.
Classes 0 and 1 are made 95% grayscale, the others 5%, so a model trained on
the pooled data can use "is it gray" as a shortcut.  The test set is half
grayscale for every class.  Client 0 holds all grayscale training images and
client 1 all colour ones; FedMA with communication combines them.
"""
import sys

import numpy as np

from fedma.data import synth_images
from fedma.experiment import grayscale_bias_split
from fedma.matching import MatchConfig
from fedma.nn import evaluate, small_cnn
from fedma.nn.training import SgdConfig
from fedma.protocols import ClientState, fedma_with_comm, train_centralized, train_clients

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
full = synth_images(4, 4000, 8, seed=1000 + seed, noise=3.0)
train, test = full.subset(np.arange(2000)), full.subset(np.arange(2000, 4000))
biased, half_gray, plan = grayscale_bias_split(train, test, [0, 1], seed=seed)
cfg = SgdConfig(epochs=10, seed=seed)

unbiased = train_centralized(small_cnn(4, seed=seed), train, cfg)
central = train_centralized(small_cnn(4, seed=seed), biased, cfg)
print("centralized, unbiased data:", round(evaluate(unbiased, half_gray), 4))
print("centralized, biased data:  ", round(evaluate(central, half_gray), 4))

clients = [ClientState(j, small_cnn(4, seed=seed * 10 + j + 1), biased.subset(idx))
           for j, idx in enumerate(plan.indices)]
print("class counts (gray client, colour client):", [c.class_counts.tolist() for c in clients])
clients = train_clients(clients, cfg)
print("local models:", [round(evaluate(c.model, half_gray), 4) for c in clients])

_, reports = fedma_with_comm(clients, 4, MatchConfig(), cfg, test_set=half_gray)
for r in reports:
    if not np.isnan(r.accuracy):
        print(f"FedMA-comm after round {r.round}: {r.accuracy:.4f} (growth {r.growth_rate:.3f})")
