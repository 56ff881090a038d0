"""Write a small MNIST subset in IDX format for the CLI and the other demos.

The 5,000-image sample bundled with mlxtend is split per class into 200
training and 300 test images, then written as

    <dir>/train-images-idx3-ubyte   <dir>/train-labels-idx1-ubyte
    <dir>/t10k-images-idx3-ubyte    <dir>/t10k-labels-idx1-ubyte

Point FEDMA_DATA_DIR at <dir> afterwards.  Full MNIST in the same layout
works unchanged.

    python3 demos/00_prepare_mnist_subset.py data/mnist-5k
"""
import os
import sys

import numpy as np
from mlxtend.data import mnist_data

from fedma.data import write_idx

out = sys.argv[1] if len(sys.argv) > 1 else "data/mnist-5k"
os.makedirs(out, exist_ok=True)

X, y = mnist_data()
images = X.reshape(-1, 28, 28).astype(np.uint8)
rng = np.random.default_rng(0)
train, test = [], []
for k in range(10):
    members = rng.permutation(np.flatnonzero(y == k))
    train.extend(members[:200])
    test.extend(members[200:])
train, test = rng.permutation(train), np.array(test)

write_idx(images[train], y[train], os.path.join(out, "train-images-idx3-ubyte"),
          os.path.join(out, "train-labels-idx1-ubyte"))
write_idx(images[test], y[test], os.path.join(out, "t10k-images-idx3-ubyte"),
          os.path.join(out, "t10k-labels-idx1-ubyte"))
print(f"{len(train)} training and {len(test)} test images in {out}")
print(f"export FEDMA_DATA_DIR={os.path.abspath(out)}")
