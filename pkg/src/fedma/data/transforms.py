"""Image transforms: grayscale domain skew and crop/flip augmentation."""
from __future__ import annotations

import numpy as np

from .datasets import Dataset

LUMA = np.array([0.299, 0.587, 0.114])


def to_grayscale(images):
    """Luminance replicated to all three channels of ``(n, 3, H, W)`` images."""
    lum = np.einsum("nchw,c->nhw", images, LUMA)
    return np.repeat(lum[:, None], 3, axis=1)


def apply_grayscale_bias(dataset, biased_classes, heavy_frac=0.95, light_frac=0.05, seed=0):
    """Turn ``heavy_frac`` of each biased class and ``light_frac`` of the rest grayscale.

    ``biased_classes`` is either an explicit collection of class ids or a count
    of classes to draw at random.  Returns ``(dataset, is_gray)`` where the
    boolean tags mark converted examples.
    """
    rng = np.random.default_rng(seed)
    k = dataset.num_classes
    if np.isscalar(biased_classes):
        biased = set(rng.choice(k, size=int(biased_classes), replace=False).tolist())
    else:
        biased = set(int(c) for c in biased_classes)
    tags = np.zeros(len(dataset), dtype=bool)
    for c in range(k):
        members = np.flatnonzero(dataset.labels == c)
        frac = heavy_frac if c in biased else light_frac
        count = int(round(frac * len(members)))
        tags[rng.choice(members, size=count, replace=False)] = True
    features = dataset.features.copy()
    if tags.any():
        features[tags] = to_grayscale(features[tags])
    return Dataset(features, dataset.labels, k), tags


def hflip(batch):
    return batch[..., ::-1].copy()


def augment(batch, seed=0, pad=4, flip_prob=0.5, flip=None):
    """Random crop (from ``pad`` pixels of zero padding) and horizontal flip.

    ``seed`` may be an integer or a ``numpy.random.Generator``.  ``flip`` set to
    True/False forces or disables flipping for every image.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n, _, h, w = batch.shape
    out = np.empty_like(batch)
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else batch
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < flip_prob if flip is None else np.full(n, bool(flip))
    for i in range(n):
        img = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = img[..., ::-1] if flips[i] else img
    return out
