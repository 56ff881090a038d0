"""Layer definitions with hand-written forward and backward passes.

Weight layouts follow the ``x @ W`` convention so that the neurons of a layer
are the *columns* of its weight matrix:

* ``Dense``      weight ``(in, out)``, bias ``(out,)``
* ``Conv2d``     weight ``(C_in, kh, kw, C_out)``, bias ``(C_out,)``
* ``Lstm``       w_ih ``(D, 4L)``, w_hh ``(L, 4L)``, bias ``(4L,)``; the four
  gate blocks along the last axis are ordered input, forget, cell, output
* ``Embedding``  weight ``(V, d)``

Every layer is an immutable dataclass.  ``forward`` returns ``(out, cache)``
and ``backward`` consumes the cache and returns ``(dx, grads)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import ClassVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity", "softmax")

LSTM_GATES = ("input", "forget", "cell", "output")


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "sigmoid":
        return _sigmoid(z)
    # identity and softmax: the softmax of a final layer is applied by the network
    return z


def _activation_grad(out, dout, kind):
    if kind == "relu":
        return dout * (out > 0)
    if kind == "tanh":
        return dout * (1.0 - out * out)
    if kind == "sigmoid":
        return dout * out * (1.0 - out)
    return dout


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _glorot(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass(frozen=True)
class Layer:
    kind: ClassVar[str] = "layer"
    weighted: ClassVar[bool] = False

    def param_shapes(self):
        return {}

    def init(self, rng):
        return {}

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x, params, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dout, params, cache, need_dx=True):
        raise NotImplementedError

    def resized(self, *, in_units=None, out_units=None):
        """Copy of this layer with new input/output unit counts."""
        return self


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int
    out_features: int
    activation: str = "relu"

    kind: ClassVar[str] = "dense"
    weighted: ClassVar[bool] = True

    def __post_init__(self):
        if self.in_features <= 0 or self.out_features <= 0:
            raise DimensionError(f"dense extents must be positive, got {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_units(self):
        return self.in_features

    @property
    def out_units(self):
        return self.out_features

    def param_shapes(self):
        return {"weight": (self.in_features, self.out_features), "bias": (self.out_features,)}

    def init(self, rng):
        return {
            "weight": _glorot(rng, (self.in_features, self.out_features),
                              self.in_features, self.out_features),
            "bias": np.zeros(self.out_features),
        }

    def output_shape(self, in_shape):
        if math.prod(in_shape) != self.in_features:
            raise DimensionError(
                f"dense layer expects {self.in_features} inputs, got shape {tuple(in_shape)}")
        return (self.out_features,)

    def forward(self, x, params, train=False, rng=None):
        x2 = x.reshape(len(x), -1)
        if x2.shape[1] != self.in_features:
            raise DimensionError(
                f"dense layer expects {self.in_features} inputs, got {x2.shape[1]}")
        out = _activate(x2 @ params["weight"] + params["bias"], self.activation)
        return out, (x.shape, x2, out)

    def backward(self, dout, params, cache, need_dx=True):
        in_shape, x2, out = cache
        dz = _activation_grad(out, dout, self.activation)
        grads = {"weight": x2.T @ dz, "bias": dz.sum(axis=0)}
        dx = (dz @ params["weight"].T).reshape(in_shape) if need_dx else None
        return dx, grads

    def resized(self, *, in_units=None, out_units=None):
        return replace(self,
                       in_features=self.in_features if in_units is None else in_units,
                       out_features=self.out_features if out_units is None else out_units)


@dataclass(frozen=True)
class Conv2d(Layer):
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    activation: str = "relu"

    kind: ClassVar[str] = "conv2d"
    weighted: ClassVar[bool] = True

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) <= 0 or self.padding < 0:
            raise DimensionError(f"conv extents must be positive, got {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_units(self):
        return self.in_channels

    @property
    def out_units(self):
        return self.out_channels

    def param_shapes(self):
        k = self.kernel
        return {"weight": (self.in_channels, k, k, self.out_channels), "bias": (self.out_channels,)}

    def init(self, rng):
        k2 = self.kernel * self.kernel
        return {
            "weight": _glorot(rng, self.param_shapes()["weight"],
                              self.in_channels * k2, self.out_channels * k2),
            "bias": np.zeros(self.out_channels),
        }

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(
                f"conv layer expects ({self.in_channels}, H, W) input, got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho <= 0 or wo <= 0:
            raise DimensionError(f"input {tuple(in_shape)} too small for kernel {self.kernel}")
        return (self.out_channels, ho, wo)

    def _columns(self, x):
        p, s, k = self.padding, self.stride, self.kernel
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        b, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
        return cols, (ho, wo), x.shape

    def forward(self, x, params, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv layer expects (B, {self.in_channels}, H, W) input, got {x.shape}")
        cols, (ho, wo), padded_shape = self._columns(x)
        wmat = params["weight"].reshape(-1, self.out_channels)
        z = cols @ wmat + params["bias"]
        out = _activate(z, self.activation).reshape(len(x), ho, wo, self.out_channels)
        out = out.transpose(0, 3, 1, 2)
        return out, (cols, (ho, wo), padded_shape, out)

    def backward(self, dout, params, cache, need_dx=True):
        cols, (ho, wo), padded_shape, out = cache
        dz = _activation_grad(out, dout, self.activation)
        dz2 = dz.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wmat = params["weight"].reshape(-1, self.out_channels)
        grads = {"weight": (cols.T @ dz2).reshape(params["weight"].shape),
                 "bias": dz2.sum(axis=0)}
        if not need_dx:
            return None, grads
        k, s, p = self.kernel, self.stride, self.padding
        b = padded_shape[0]
        dcols = (dz2 @ wmat.T).reshape(b, ho, wo, self.in_channels, k, k)
        dpad = np.zeros(padded_shape)
        for i in range(k):
            for j in range(k):
                dpad[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dpad = dpad[:, :, p:-p, p:-p]
        return dpad, grads

    def resized(self, *, in_units=None, out_units=None):
        return replace(self,
                       in_channels=self.in_channels if in_units is None else in_units,
                       out_channels=self.out_channels if out_units is None else out_units)


@dataclass(frozen=True)
class MaxPool(Layer):
    size: int = 2
    stride: int | None = None

    kind: ClassVar[str] = "maxpool"

    @property
    def step(self):
        return self.size if self.stride is None else self.stride

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"max-pool expects (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        return (c, (h - self.size) // self.step + 1, (w - self.size) // self.step + 1)

    def forward(self, x, params, train=False, rng=None):
        k, s = self.size, self.step
        b, c = x.shape[:2]
        _, ho, wo = self.output_shape(x.shape[1:])
        if s == k:
            v = x[:, :, :ho * k, :wo * k].reshape(b, c, ho, k, wo, k)
            win = v.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
        else:
            win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
            win = win.reshape(b, c, ho, wo, k * k)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, params, cache, need_dx=True):
        if not need_dx:
            return None, {}
        x_shape, idx = cache
        k, s = self.size, self.step
        b, c, ho, wo = idx.shape
        if s == k:
            g = np.zeros((b, c, ho, wo, k * k))
            np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
            g = g.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
            dx = np.zeros(x_shape)
            dx[:, :, :ho * k, :wo * k] = g
            return dx, {}
        dx = np.zeros(x_shape)
        di, dj = np.divmod(idx, k)
        rows = np.arange(ho)[None, None, :, None] * s + di
        cols = np.arange(wo)[None, None, None, :] * s + dj
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (np.broadcast_to(bi, idx.shape), np.broadcast_to(ci, idx.shape), rows, cols), dout)
        return dx, {}


@dataclass(frozen=True)
class Dropout(Layer):
    rate: float = 0.0

    kind: ClassVar[str] = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")

    def forward(self, x, params, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, dout, params, cache, need_dx=True):
        if not need_dx:
            return None, {}
        return (dout if cache is None else dout * cache), {}


@dataclass(frozen=True)
class Embedding(Layer):
    vocab_size: int
    dim: int

    kind: ClassVar[str] = "embedding"
    weighted: ClassVar[bool] = True
    activation: ClassVar[str] = "identity"

    @property
    def in_units(self):
        return self.vocab_size

    @property
    def out_units(self):
        return self.dim

    def param_shapes(self):
        return {"weight": (self.vocab_size, self.dim)}

    def init(self, rng):
        return {"weight": _glorot(rng, (self.vocab_size, self.dim), self.vocab_size, self.dim)}

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise DimensionError(f"embedding expects (T,) token input, got {tuple(in_shape)}")
        return (in_shape[0], self.dim)

    def forward(self, x, params, train=False, rng=None):
        tokens = np.asarray(x)
        if tokens.ndim != 2:
            raise DimensionError(f"embedding expects (B, T) tokens, got shape {tokens.shape}")
        tokens = tokens.astype(np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise DimensionError(f"token ids must lie in [0, {self.vocab_size})")
        return params["weight"][tokens], tokens

    def backward(self, dout, params, cache, need_dx=True):
        grad = np.zeros((self.vocab_size, self.dim))
        np.add.at(grad, cache.reshape(-1), dout.reshape(-1, self.dim))
        return None, {"weight": grad}

    def resized(self, *, in_units=None, out_units=None):
        return replace(self, dim=self.dim if out_units is None else out_units)


@dataclass(frozen=True)
class Lstm(Layer):
    """Single-layer LSTM returning the final hidden state."""

    input_size: int
    hidden_size: int

    kind: ClassVar[str] = "lstm"
    weighted: ClassVar[bool] = True
    activation: ClassVar[str] = "tanh"
    gates: ClassVar[int] = len(LSTM_GATES)

    def __post_init__(self):
        if self.input_size <= 0 or self.hidden_size <= 0:
            raise DimensionError(f"lstm extents must be positive, got {self}")

    @property
    def in_units(self):
        return self.input_size

    @property
    def out_units(self):
        return self.hidden_size

    def param_shapes(self):
        g = self.gates * self.hidden_size
        return {"w_ih": (self.input_size, g), "w_hh": (self.hidden_size, g), "bias": (g,)}

    def init(self, rng):
        d, h = self.input_size, self.hidden_size
        return {
            "w_ih": np.concatenate([_glorot(rng, (d, h), d, h) for _ in LSTM_GATES], axis=1),
            "w_hh": np.concatenate([_glorot(rng, (h, h), h, h) for _ in LSTM_GATES], axis=1),
            "bias": np.zeros(self.gates * h),
        }

    def output_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != self.input_size:
            raise DimensionError(
                f"lstm expects (T, {self.input_size}) input, got {tuple(in_shape)}")
        return (self.hidden_size,)

    def forward(self, x, params, train=False, rng=None):
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise DimensionError(
                f"lstm expects (B, T, {self.input_size}) input, got {x.shape}")
        b, t, _ = x.shape
        hs = self.hidden_size
        h = np.zeros((b, hs))
        c = np.zeros((b, hs))
        xw = x @ params["w_ih"] + params["bias"]
        steps = []
        for k in range(t):
            z = xw[:, k] + h @ params["w_hh"]
            i = _sigmoid(z[:, :hs])
            f = _sigmoid(z[:, hs:2 * hs])
            g = np.tanh(z[:, 2 * hs:3 * hs])
            o = _sigmoid(z[:, 3 * hs:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            steps.append((h_prev, c_prev, i, f, g, o, tc))
        return h, (x, steps)

    def backward(self, dout, params, cache, need_dx=True):
        x, steps = cache
        hs = self.hidden_size
        w_hh = params["w_hh"]
        dz_all = np.empty((x.shape[0], x.shape[1], self.gates * hs))
        dh = dout
        dc = np.zeros_like(dout)
        d_whh = np.zeros_like(w_hh)
        for k in range(len(steps) - 1, -1, -1):
            h_prev, c_prev, i, f, g, o, tc = steps[k]
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1)
            dz_all[:, k] = dz
            d_whh += h_prev.T @ dz
            dh = dz @ w_hh.T
            dc = dc * f
        flat = dz_all.reshape(-1, self.gates * hs)
        grads = {
            "w_ih": x.reshape(-1, self.input_size).T @ flat,
            "w_hh": d_whh,
            "bias": flat.sum(axis=0),
        }
        dx = (dz_all @ params["w_ih"].T) if need_dx else None
        return dx, grads

    def resized(self, *, in_units=None, out_units=None):
        return replace(self,
                       input_size=self.input_size if in_units is None else in_units,
                       hidden_size=self.hidden_size if out_units is None else out_units)


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, MaxPool, Dropout, Embedding, Lstm)}
