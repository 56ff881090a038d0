"""Immutable network container plus forward/backward passes."""
from __future__ import annotations

import math
from dataclasses import InitVar, dataclass, field

import numpy as np

from ..errors import DimensionError, EmptyDatasetError, NumericalInstabilityError
from .layers import Conv2d, Dense, Dropout, Embedding, Layer, Lstm, MaxPool


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """An ordered stack of layers and their parameters.

    ``input_shape`` excludes the batch axis.  Token models use ``(T,)`` where
    ``T`` may be ``None`` for variable-length sequences.
    """

    layers: tuple
    params: tuple
    input_shape: tuple
    check: InitVar[bool] = True
    num_classes: int = field(init=False)

    def __post_init__(self, check):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "params", tuple(dict(p) for p in self.params))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if len(self.layers) != len(self.params):
            raise DimensionError("one parameter dict per layer is required")
        weighted = self.weighted_indices
        if not weighted:
            raise DimensionError("a network needs at least one weighted layer")
        final = self.layers[weighted[-1]]
        if not isinstance(final, Dense):
            raise DimensionError("the final weighted layer must be dense")
        for pos in weighted[:-1]:
            act = getattr(self.layers[pos], "activation", "identity")
            if isinstance(self.layers[pos], (Dense, Conv2d)) and act in ("identity", "softmax"):
                raise DimensionError(
                    f"layer {pos}: identity/softmax activation is only allowed on the final layer")
        for pos, (layer, p) in enumerate(zip(self.layers, self.params)):
            expected = layer.param_shapes()
            if set(expected) != set(p):
                raise DimensionError(f"layer {pos}: expected parameters {sorted(expected)}, got {sorted(p)}")
            for name, shape in expected.items():
                if p[name].shape != tuple(shape):
                    raise DimensionError(
                        f"layer {pos} {name}: expected shape {tuple(shape)}, got {p[name].shape}")
        if check:
            self.shapes()  # validates consecutive dims
        object.__setattr__(self, "num_classes", final.out_features)

    @property
    def weighted_indices(self):
        """Positions (in ``layers``) of weight-bearing layers."""
        return tuple(i for i, layer in enumerate(self.layers) if layer.weighted)

    @property
    def depth(self):
        """Number of weight-bearing layers, N."""
        return len(self.weighted_indices)

    def weighted_layer(self, n):
        """The layer at 1-based weighted index ``n``."""
        return self.layers[self.position(n)]

    def position(self, n):
        idx = self.weighted_indices
        if not 1 <= n <= len(idx):
            raise IndexError(f"weighted layer index {n} outside 1..{len(idx)}")
        return idx[n - 1]

    def shapes(self):
        """Per-layer output shapes (batch axis excluded)."""
        shape = self.input_shape
        out = []
        for layer in self.layers:
            if isinstance(layer, Lstm) and shape and shape[0] is None:
                shape = (1,) + tuple(shape[1:])
            if isinstance(layer, Embedding) and shape and shape[0] is None:
                shape = (1,)
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    def param_count(self):
        return sum(int(a.size) for p in self.params for a in p.values())

    def layer_param_count(self, n):
        return sum(int(a.size) for a in self.params[self.position(n)].values())

    def replace_layer(self, position, layer, params):
        """New model with one entry of ``layers``/``params`` swapped."""
        layers = list(self.layers)
        plist = list(self.params)
        layers[position] = layer
        plist[position] = params
        return NetworkModel(layers, plist, self.input_shape)

    def copy(self):
        return NetworkModel(self.layers, [{k: v.copy() for k, v in p.items()} for p in self.params],
                            self.input_shape)

    @property
    def output_activation(self):
        return self.layers[self.weighted_indices[-1]].activation


def build_model(layers, input_shape, seed=0):
    """Initialise a network with seeded Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    return NetworkModel(layers, [layer.init(rng) for layer in layers], input_shape)


def check_input(model, batch):
    batch = np.asarray(batch)
    expected = model.input_shape
    got = batch.shape[1:]
    ok = len(got) == len(expected) and all(e is None or e == g for e, g in zip(expected, got))
    if not ok:
        raise DimensionError(f"batch shape {batch.shape} does not match model input {expected}")
    return batch


def _run(model, batch, train=False, rng=None, start=0, keep_cache=False):
    x = batch
    caches = []
    for layer, p in zip(model.layers[start:], model.params[start:]):
        x, cache = layer.forward(x, p, train=train, rng=rng)
        if keep_cache:
            caches.append(cache)
    return x, caches


def partial_forward(model, batch, stop):
    """Activation leaving ``model.layers[stop - 1]`` (inference mode)."""
    x = batch
    for layer, p in zip(model.layers[:stop], model.params[:stop]):
        x, _ = layer.forward(x, p)
    return x


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model, batch, train=False, rng=None):
    """Network output for ``batch``: logits, or probabilities for a softmax head."""
    batch = check_input(model, batch)
    out, _ = _run(model, batch, train=train, rng=rng)
    if model.output_activation == "softmax":
        return softmax(out)
    return out


def logits(model, batch):
    out, _ = _run(model, check_input(model, batch))
    return out


def predict_proba(model, batch):
    return softmax(logits(model, batch))


def predict(model, batch):
    # np.argmax resolves ties to the lowest class index
    return np.argmax(logits(model, batch), axis=1)


def cross_entropy(logit_batch, labels):
    z = logit_batch - logit_batch.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean(), logp


def backward(model, batch, labels, train=False, rng=None, start=0, stop_grad_below=None):
    """Mean cross-entropy loss and its gradient for every parameter tensor.

    ``start`` skips the first layers (``batch`` is then the activation entering
    layer ``start``).  Gradients are not propagated into layers with position
    below ``stop_grad_below``; their entries in the result are ``None``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if start == 0:
        batch = check_input(model, batch)
    if labels.shape != (len(batch),):
        raise DimensionError("one label per example is required")
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise DimensionError(f"labels must lie in [0, {model.num_classes})")
    out, caches = _run(model, batch, train=train, rng=rng, start=start, keep_cache=True)
    loss, logp = cross_entropy(out, labels)
    if not np.isfinite(loss):
        raise NumericalInstabilityError(f"non-finite loss {loss}")
    dout = np.exp(logp)
    dout[np.arange(len(labels)), labels] -= 1.0
    dout /= len(labels)
    stop = start if stop_grad_below is None else max(start, stop_grad_below)
    grads = [None] * len(model.layers)
    for pos in range(len(model.layers) - 1, start - 1, -1):
        if pos < stop:
            break
        layer = model.layers[pos]
        need_dx = pos > stop
        dout, g = layer.backward(dout, model.params[pos], caches[pos - start], need_dx=need_dx)
        grads[pos] = g
    return loss, grads


def evaluate(model, dataset, batch_size=512):
    """Fraction of correctly classified examples."""
    n = len(dataset)
    if n == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    correct = 0
    for s in range(0, n, batch_size):
        pred = predict(model, dataset.features[s:s + batch_size])
        correct += int((pred == dataset.labels[s:s + batch_size]).sum())
    return correct / n


# ---------------------------------------------------------------- presets

def lenet(num_classes=10, in_channels=1, image_size=28, seed=0):
    """LeNet as used for MNIST: 431,080 parameters at the default size."""
    s = ((image_size - 4) // 2 - 4) // 2
    layers = [
        Conv2d(in_channels, 20, 5), MaxPool(2),
        Conv2d(20, 50, 5), MaxPool(2),
        Dense(50 * s * s, 500), Dense(500, num_classes, "identity"),
    ]
    return build_model(layers, (in_channels, image_size, image_size), seed)


def mlp(in_features, hidden, num_classes, activation="relu", seed=0):
    widths = [in_features, *hidden]
    layers = [Dense(a, b, activation) for a, b in zip(widths, widths[1:])]
    layers.append(Dense(widths[-1], num_classes, "identity"))
    return build_model(layers, (in_features,), seed)


def char_lstm(vocab_size=80, embed_dim=8, hidden_size=256, seq_len=None, seed=0):
    layers = [Embedding(vocab_size, embed_dim), Lstm(embed_dim, hidden_size),
              Dense(hidden_size, vocab_size, "identity")]
    return build_model(layers, (seq_len,), seed)


def vgg9(num_classes=10, seed=0):
    """VGG-9 without batch normalisation (dropout 5%/10%/10%)."""
    def conv(a, b):
        return Conv2d(a, b, 3, padding=1)
    layers = [
        conv(3, 32), conv(32, 64), MaxPool(2),
        conv(64, 128), conv(128, 128), MaxPool(2), Dropout(0.05),
        conv(128, 256), conv(256, 256), MaxPool(2), Dropout(0.1),
        Dense(4096, 512), Dense(512, 512), Dropout(0.1),
        Dense(512, num_classes, "identity"),
    ]
    return build_model(layers, (3, 32, 32), seed)


def small_cnn(num_classes, in_channels=3, image_size=8, channels=(8, 16), hidden=32, seed=0):
    """Compact conv net for desk-scale image experiments."""
    c1, c2 = channels
    s = image_size // 2
    layers = [
        Conv2d(in_channels, c1, 3, padding=1), Conv2d(c1, c2, 3, padding=1), MaxPool(2),
        Dense(c2 * s * s, hidden), Dense(hidden, num_classes, "identity"),
    ]
    return build_model(layers, (in_channels, image_size, image_size), seed)


def total_params(layers: list[Layer]) -> int:
    return sum(math.prod(s) for layer in layers for s in layer.param_shapes().values())
