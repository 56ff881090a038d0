"""Mini-batch SGD for local client training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DivergenceError, EmptyDatasetError
from .layers import Dropout
from .network import NetworkModel, backward, partial_forward

DIVERGENCE_LOSS = 1e6


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    last_layer_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 64
    prox_mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("must be positive", "learning_rate")
        if self.last_layer_lr <= 0:
            raise ConfigError("must be positive", "last_layer_lr")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError("must be an integer >= 1", "epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.prox_mu < 0:
            raise ConfigError("must be >= 0", "prox_mu")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must lie in [0, 1)", "momentum")
        if self.weight_decay < 0:
            raise ConfigError("must be >= 0", "weight_decay")


def prox_penalty(model, anchor, mu):
    """The proximal term (mu/2)·||w - anchor||² summed over all parameters."""
    total = 0.0
    for p, q in zip(model.params, anchor.params):
        for name in p:
            d = p[name] - q[name]
            total += float(np.sum(d * d))
    return 0.5 * mu * total


def _prefix_position(model, frozen_prefix):
    """Layer-list position of the first trainable layer."""
    if frozen_prefix == 0:
        return 0
    pos = model.position(frozen_prefix) + 1
    # parameter-free layers other than dropout travel with the frozen prefix
    while pos < len(model.layers) and not model.layers[pos].weighted \
            and not isinstance(model.layers[pos], Dropout):
        pos += 1
    return pos


def _embed_prefix(model, features, start, batch_size=512):
    if start == 0:
        return features
    return np.concatenate([partial_forward(model, features[s:s + batch_size], start)
                           for s in range(0, len(features), batch_size)])


def train_local(model: NetworkModel, dataset, cfg: SgdConfig, frozen_prefix=0, anchor=None,
                augment=None):
    """Train ``model`` on ``dataset`` and return the updated copy.

    The first ``frozen_prefix`` weighted layers are left bit-identical.  When
    only the final layer is trainable (``frozen_prefix == N - 1 > 0``) it is
    trained with ``cfg.last_layer_lr`` for ``3 * cfg.epochs`` epochs, and during
    any frozen-prefix retraining weight decay is applied to the final layer only.

    With ``cfg.prox_mu > 0`` the proximal term ``(mu/2)·||w - anchor||²`` is
    added to the loss.  It is applied as an exact proximal step after the
    momentum update so that large ``mu`` cannot destabilise training.

    ``augment`` is an optional ``(batch, rng) -> batch`` transform.
    """
    n_layers = model.depth
    if not 0 <= frozen_prefix < n_layers:
        raise ConfigError(f"must lie in [0, {n_layers})", "frozen_prefix")
    if (anchor is not None) != (cfg.prox_mu > 0):
        raise ConfigError("an anchor model is required exactly when prox_mu > 0", "prox_mu")
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")

    lr, epochs = cfg.learning_rate, cfg.epochs
    if frozen_prefix > 0 and frozen_prefix == n_layers - 1:
        lr, epochs = cfg.last_layer_lr, 3 * cfg.epochs
    final_pos = model.weighted_indices[-1]
    start = _prefix_position(model, frozen_prefix)

    work = model.copy()
    params = list(work.params)
    rng = np.random.default_rng(cfg.seed)
    decay = [cfg.weight_decay if (frozen_prefix == 0 or pos == final_pos) else 0.0
             for pos in range(len(params))]
    velocity = [{k: np.zeros_like(v) for k, v in p.items()} if pos >= start else None
                for pos, p in enumerate(params)]
    has_dropout = any(isinstance(layer, Dropout) for layer in model.layers)

    features = dataset.features
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if augment is None:
        inputs, run_start = _embed_prefix(model, features, start), start
    else:
        inputs, run_start = features, 0

    n = len(labels)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = inputs[idx]
            if augment is not None:
                xb = augment(xb, rng)
            loss, grads = backward(work, xb, labels[idx], train=has_dropout, rng=rng,
                                   start=run_start, stop_grad_below=start)
            if not loss <= DIVERGENCE_LOSS:
                raise DivergenceError(epoch, loss)
            for pos in range(start, len(params)):
                g = grads[pos]
                if not g:
                    continue
                p, vel = params[pos], velocity[pos]
                for name, gv in g.items():
                    w = p[name]
                    if decay[pos]:
                        gv = gv + decay[pos] * w
                    v = vel[name]
                    v *= cfg.momentum
                    v += gv
                    w -= lr * v
                    if cfg.prox_mu > 0:
                        a = anchor.params[pos][name]
                        w += lr * cfg.prox_mu * a
                        w /= 1.0 + lr * cfg.prox_mu
    return NetworkModel(work.layers, params, work.input_shape)
