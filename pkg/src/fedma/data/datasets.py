"""Dataset container, binary loaders and synthetic generators."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR_MEAN = np.array([0.491372549, 0.482352941, 0.446666667])
CIFAR_STD = np.array([0.247058824, 0.243529412, 0.261568627])
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", np.asarray(self.features))
        if len(self.features) != len(labels):
            raise DimensionError(
                f"{len(self.features)} feature rows but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DimensionError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def split(self, fraction, seed=0):
        """Random ``(first, second)`` split with ``round(fraction * n)`` examples first."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))


def concat(datasets):
    datasets = list(datasets)
    return Dataset(np.concatenate([d.features for d in datasets]),
                   np.concatenate([d.labels for d in datasets]),
                   max(d.num_classes for d in datasets))


# ------------------------------------------------------------------ IDX

def _read_idx(path, magic, rank):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 + 4 * rank:
        raise FormatError(f"{path}: truncated IDX header")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise FormatError(f"{path}: IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{rank}I", data[4:4 + 4 * rank])
    body = data[4 + 4 * rank:]
    if len(body) != int(np.prod(dims)):
        raise FormatError(f"{path}: truncated IDX body ({len(body)} bytes for dims {dims})")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes=10):
    """Read an IDX image/label pair (MNIST layout); pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    features = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(features, labels.astype(np.int64), num_classes)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images ``(n, rows, cols)`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(split="train", data_dir=None):
    """MNIST from ``data_dir`` (default ``$FEDMA_DATA_DIR``), in IDX format."""
    root = data_dir or os.environ.get("FEDMA_DATA_DIR")
    if not root:
        raise FileNotFoundError("set FEDMA_DATA_DIR or pass data_dir")
    img, lab = MNIST_FILES[split]
    for sub in ("", "mnist", "MNIST"):
        base = os.path.join(root, sub)
        if os.path.exists(os.path.join(base, img)):
            return load_idx(os.path.join(base, img), os.path.join(base, lab))
    raise FileNotFoundError(f"no MNIST {split} files under {root}")


# ------------------------------------------------------------------ CIFAR

def normalize(images, mean=CIFAR_MEAN, std=CIFAR_STD):
    """Per-channel standardisation of ``(n, 3, H, W)`` images in [0, 1]."""
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


def denormalize(images, mean=CIFAR_MEAN, std=CIFAR_STD):
    return images * std[None, :, None, None] + mean[None, :, None, None]


def load_cifar_bin(paths, normalized=True):
    """Read CIFAR-10 binary batches (3073-byte records: label, then R, G, B planes)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    feats, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = np.frombuffer(fh.read(), dtype=np.uint8)
        if raw.size % CIFAR_RECORD:
            raise FormatError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
        rec = raw.reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        feats.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    features = np.concatenate(feats)
    if normalized:
        features = normalize(features)
    return Dataset(features, np.concatenate(labels), 10)


def write_cifar_bin(images, labels, path):
    """Write uint8 images ``(n, 3, 32, 32)`` with labels as one CIFAR binary batch."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


# ------------------------------------------------------------------ synthetic

def synth_classification(num_classes, n, dim, seed=0, separation=3.0, noise=1.0):
    """Gaussian class blobs with exactly balanced classes (counts differ by at most 1).

    Class means are drawn on a sphere of radius ``separation``; examples are
    shuffled.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    features = means[labels] + noise * rng.normal(size=(n, dim))
    return Dataset(features, labels, num_classes)


def synth_images(num_classes, n, size=8, seed=0, noise=3.0, tint=(0.9, 0.5, 0.2), tint_jitter=0.1,
                 channel_noise=0.1):
    """Tinted colour images whose class lives only in a luminance pattern.

    Each class has a fixed random ``size x size`` template.  An example is its
    template plus Gaussian noise, spread over three channels by a per-image
    jittered ``tint``.  Colour therefore carries no class information, which
    makes grayscale conversion a pure domain shift.
    """
    rng = np.random.default_rng(seed)
    templates = rng.normal(size=(num_classes, size, size))
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    lum = templates[labels] + noise * rng.normal(size=(n, size, size))
    colour = np.asarray(tint, dtype=np.float64)[None, :, None, None] \
        + tint_jitter * rng.normal(size=(n, 3, 1, 1))
    features = colour * lum[:, None] + channel_noise * rng.normal(size=(n, 3, size, size))
    return Dataset(features, labels, num_classes)


def stratified_sample(dataset, n, seed=0):
    """``n`` examples with per-class counts as equal as the data allows, in shuffled order."""
    if n >= len(dataset):
        return dataset
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(np.flatnonzero(dataset.labels == k)) for k in range(dataset.num_classes)]
    take = np.zeros(len(pools), dtype=np.int64)
    remaining = n
    # water-filling: small classes give all they have, the rest share evenly
    by_size = np.argsort([len(p) for p in pools], kind="stable")
    for rank, k in enumerate(by_size):
        take[k] = min(len(pools[k]), remaining // (len(pools) - rank))
        remaining -= take[k]
    for k in rng.permutation(len(pools)):
        if remaining == 0:
            break
        extra = min(remaining, len(pools[k]) - take[k])
        take[k] += extra
        remaining -= extra
    idx = np.concatenate([p[:t] for p, t in zip(pools, take)])
    return dataset.subset(rng.permutation(idx))
