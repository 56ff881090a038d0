import os

import numpy as np
import pytest

from fedma.data import load_idx, write_idx


def _mnist_subset(root):
    """Per-class 200/300 train/test split of the 5k sample shipped with mlxtend, via IDX files."""
    data = pytest.importorskip("mlxtend.data")
    X, y = data.mnist_data()
    images = X.reshape(-1, 28, 28).astype(np.uint8)
    rng = np.random.default_rng(0)
    train, test = [], []
    for k in range(10):
        members = rng.permutation(np.flatnonzero(y == k))
        train.extend(members[:200])
        test.extend(members[200:])
    train, test = rng.permutation(train), np.array(test)
    paths = {}
    for split, idx in (("train", train), ("t10k", test)):
        img = os.path.join(root, f"{split}-images-idx3-ubyte")
        lab = os.path.join(root, f"{split}-labels-idx1-ubyte")
        write_idx(images[idx], y[idx], img, lab)
        paths[split] = (img, lab)
    return paths


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("mnist")
    _mnist_subset(str(root))
    return str(root)


@pytest.fixture(scope="session")
def mnist_2k(mnist_dir):
    train = load_idx(os.path.join(mnist_dir, "train-images-idx3-ubyte"),
                     os.path.join(mnist_dir, "train-labels-idx1-ubyte"))
    test = load_idx(os.path.join(mnist_dir, "t10k-images-idx3-ubyte"),
                    os.path.join(mnist_dir, "t10k-labels-idx1-ubyte"))
    return train, test


def max_abs_diff(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def params_equal(m1, m2):
    if len(m1.params) != len(m2.params):
        return False
    for p, q in zip(m1.params, m2.params):
        if set(p) != set(q):
            return False
        for k in p:
            if p[k].shape != q[k].shape or p[k].tobytes() != q[k].tobytes():
                return False
    return True
