"""Permutation algebra over network layers.

An :class:`Assignment` sends each of the ``L_j`` local units of a layer to a
distinct slot of an ``L``-wide global layer.  Applied to the output side of
layer ``n`` and the input side of layer ``n + 1`` it leaves the network
function unchanged; slots that receive no local unit are zero-filled
"dummy" neurons, which contribute nothing downstream.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NoNeuronsError
from .nn.layers import Conv2d, Dense, Embedding, Lstm
from .nn.network import NetworkModel


@dataclass(frozen=True, eq=False)
class Assignment:
    """Injective map from local unit ``l`` to global slot ``mapping[l]``."""

    mapping: np.ndarray
    global_size: int

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "mapping", m)
        if self.global_size < len(m):
            raise DimensionError(f"global size {self.global_size} < local size {len(m)}")
        if m.size and (m.min() < 0 or m.max() >= self.global_size):
            raise DimensionError("assignment targets must lie in [0, global_size)")
        if len(np.unique(m)) != len(m):
            raise DimensionError("assignment is not injective")

    @property
    def local_size(self):
        return len(self.mapping)

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n), n)

    @classmethod
    def random(cls, n, rng, global_size=None):
        size = n if global_size is None else global_size
        return cls(rng.permutation(size)[:n], size)

    @property
    def is_identity(self):
        return self.global_size == self.local_size and bool(np.all(self.mapping == np.arange(self.local_size)))

    def inverse(self):
        if self.global_size != self.local_size:
            raise DimensionError("only square assignments are invertible")
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.local_size)
        return Assignment(inv, self.global_size)

    def then(self, other):
        """Composition: first ``self``, then ``other`` (other.local_size == self.global_size)."""
        if other.local_size != self.global_size:
            raise DimensionError("assignments do not compose")
        return Assignment(other.mapping[self.mapping], other.global_size)

    def matrix(self):
        """The ``L_j x L`` 0/1 matrix whose row ``l`` has its one at ``mapping[l]``."""
        out = np.zeros((self.local_size, self.global_size))
        out[np.arange(self.local_size), self.mapping] = 1.0
        return out

    def __eq__(self, other):
        return (isinstance(other, Assignment) and self.global_size == other.global_size
                and np.array_equal(self.mapping, other.mapping))

    def __hash__(self):
        return hash((self.global_size, self.mapping.tobytes()))


@dataclass(frozen=True, eq=False)
class NeuronBundle:
    """One layer's neurons as rows of a matrix, ready for matching.

    ``vectors`` holds the matching coordinates.  For an LSTM, ``recurrent``
    carries the hidden-to-hidden weights of each unit with shape
    ``(L_j, gates, L_j)``; they are excluded from matching but averaged along
    with the neuron.
    """

    vectors: np.ndarray
    layer: object
    client: int = 0
    layer_index: int = 0
    recurrent: np.ndarray | None = None

    @property
    def size(self):
        return len(self.vectors)

    @property
    def dim(self):
        return self.vectors.shape[1]


def _scatter(arr, mapping, size, axis):
    shape = list(arr.shape)
    shape[axis] = size
    out = np.zeros(shape)
    idx = [slice(None)] * arr.ndim
    idx[axis] = mapping
    out[tuple(idx)] = arr
    return out


def _scatter_gates(arr, mapping, size, gates, axis):
    # gate blocks along ``axis`` are each remapped by the same assignment
    local = arr.shape[axis] // gates
    parts = np.split(arr, gates, axis=axis)
    if any(p.shape[axis] != local for p in parts):
        raise DimensionError("gate blocks are uneven")
    return np.concatenate([_scatter(p, mapping, size, axis) for p in parts], axis=axis)


def _check_out(layer, perm):
    if perm.local_size != layer.out_units:
        raise DimensionError(
            f"assignment covers {perm.local_size} units but the layer has {layer.out_units} outputs")


def permute_layer_out(layer, params, perm):
    """Output-side remap of one layer's parameters; returns ``(layer, params)``."""
    _check_out(layer, perm)
    m, size = perm.mapping, perm.global_size
    if isinstance(layer, (Dense, Conv2d)):
        new = {"weight": _scatter(params["weight"], m, size, -1),
               "bias": _scatter(params["bias"], m, size, 0)}
    elif isinstance(layer, Embedding):
        new = {"weight": _scatter(params["weight"], m, size, 1)}
    elif isinstance(layer, Lstm):
        g = layer.gates
        w_hh = _scatter_gates(params["w_hh"], m, size, g, 1)
        new = {"w_ih": _scatter_gates(params["w_ih"], m, size, g, 1),
               "w_hh": _scatter(w_hh, m, size, 0),
               "bias": _scatter_gates(params["bias"], m, size, g, 0)}
    else:
        raise NoNeuronsError(f"{layer.kind} layers carry no neurons")
    return layer.resized(out_units=size), new


def permute_layer_in(layer, params, perm):
    """Input-side remap of one layer's parameters; returns ``(layer, params)``."""
    m, size = perm.mapping, perm.global_size
    if isinstance(layer, Dense):
        w = params["weight"]
        group, rem = divmod(w.shape[0], perm.local_size)
        if rem or group == 0:
            raise DimensionError(
                f"dense layer with {w.shape[0]} inputs cannot take {perm.local_size} input units")
        w3 = w.reshape(perm.local_size, group, w.shape[1])
        w_new = _scatter(w3, m, size, 0).reshape(size * group, w.shape[1])
        return layer.resized(in_units=size * group), {"weight": w_new, "bias": params["bias"].copy()}
    if isinstance(layer, Conv2d):
        if perm.local_size != layer.in_channels:
            raise DimensionError(
                f"conv layer has {layer.in_channels} input channels, assignment covers {perm.local_size}")
        return layer.resized(in_units=size), {"weight": _scatter(params["weight"], m, size, 0),
                                              "bias": params["bias"].copy()}
    if isinstance(layer, Lstm):
        if perm.local_size != layer.input_size:
            raise DimensionError(
                f"lstm has input size {layer.input_size}, assignment covers {perm.local_size}")
        new = dict(params)
        new["w_ih"] = _scatter(params["w_ih"], m, size, 0)
        new = {k: v.copy() if k != "w_ih" else v for k, v in new.items()}
        return layer.resized(in_units=size), new
    if isinstance(layer, Embedding):
        raise DimensionError("embedding inputs are symbol ids and cannot be permuted")
    raise NoNeuronsError(f"{layer.kind} layers carry no neurons")


def _rebuild(model, pos, layer, params, input_shape=None):
    layers = list(model.layers)
    plist = [dict(p) for p in model.params]
    layers[pos] = layer
    plist[pos] = params
    return NetworkModel(layers, plist, model.input_shape if input_shape is None else input_shape,
                        check=False)


def apply_perm_out(model, n, perm):
    """Reorder (and pad) the outputs of weighted layer ``n`` into global slots."""
    pos = model.position(n)
    layer, params = permute_layer_out(model.layers[pos], model.params[pos], perm)
    return _rebuild(model, pos, layer, params)


def apply_perm_in(model, n, perm):
    """Reorder (and pad) the inputs of weighted layer ``n`` into global slots.

    For the first layer the assignment must be square; it then permutes the
    channels/features of the network input.
    """
    pos = model.position(n)
    input_shape = None
    if n == 1:
        if perm.global_size != perm.local_size:
            raise DimensionError("the network input cannot be widened")
    layer, params = permute_layer_in(model.layers[pos], model.params[pos], perm)
    return _rebuild(model, pos, layer, params, input_shape)


def permute_network(model, perms):
    """Apply one assignment per hidden layer (``perms[n - 1]`` for layer ``n < N``).

    ``perms`` may have ``N - 1`` entries or ``None`` for identity.  Padded
    assignments widen the network with inert dummy units.
    """
    out = model
    for n, perm in enumerate(perms, start=1):
        if perm is None:
            continue
        if n >= model.depth:
            raise DimensionError("the output layer cannot be permuted")
        out = apply_perm_in(apply_perm_out(out, n, perm), n + 1, perm)
    return NetworkModel(out.layers, out.params, out.input_shape)


def random_perms(model, rng):
    return [Assignment.random(model.weighted_layer(n).out_units, rng) for n in range(1, model.depth)]


# ------------------------------------------------------------------ neurons

def neurons_of(layer, params):
    """Rows = output neurons, weights followed by bias coordinate(s).

    Returns ``(vectors, recurrent)``; ``recurrent`` is ``None`` except for LSTMs.
    """
    if isinstance(layer, Dense):
        return np.hstack([params["weight"].T, params["bias"][:, None]]), None
    if isinstance(layer, Conv2d):
        w = params["weight"].reshape(-1, layer.out_channels).T
        return np.hstack([w, params["bias"][:, None]]), None
    if isinstance(layer, Embedding):
        return params["weight"].T.copy(), None
    if isinstance(layer, Lstm):
        g, h = layer.gates, layer.hidden_size
        w_ih = params["w_ih"].reshape(layer.input_size, g, h)    # (D, S, L)
        vec = np.concatenate([w_ih.transpose(2, 1, 0).reshape(h, g * layer.input_size),
                              params["bias"].reshape(g, h).T], axis=1)
        recurrent = params["w_hh"].reshape(h, g, h).transpose(2, 1, 0)  # (unit, gate, source)
        return vec, recurrent.copy()
    raise NoNeuronsError(f"{layer.kind} layers carry no neurons")


def layer_from_neurons(layer, vectors, recurrent=None):
    """Inverse of :func:`neurons_of` for a layer with ``len(vectors)`` outputs."""
    size = len(vectors)
    layer = layer.resized(out_units=size)
    if isinstance(layer, Dense):
        return layer.resized(in_units=vectors.shape[1] - 1), {
            "weight": vectors[:, :-1].T.copy(), "bias": vectors[:, -1].copy()}
    if isinstance(layer, Conv2d):
        k = layer.kernel
        cin = (vectors.shape[1] - 1) // (k * k)
        w = vectors[:, :-1].T.reshape(cin, k, k, size)
        return layer.resized(in_units=cin), {"weight": w.copy(), "bias": vectors[:, -1].copy()}
    if isinstance(layer, Embedding):
        return layer, {"weight": vectors.T.copy()}
    if isinstance(layer, Lstm):
        g = layer.gates
        d = (vectors.shape[1] - g) // g
        w_ih = vectors[:, :g * d].reshape(size, g, d).transpose(2, 1, 0).reshape(d, g * size)
        bias = vectors[:, g * d:].T.reshape(-1)
        if recurrent is None:
            raise DimensionError("lstm neurons need their recurrent weights")
        w_hh = recurrent.transpose(2, 1, 0).reshape(size, g * size)
        return layer.resized(in_units=d), {"w_ih": w_ih.copy(), "w_hh": w_hh.copy(), "bias": bias.copy()}
    raise NoNeuronsError(f"{layer.kind} layers carry no neurons")


def extract_neurons(model, n, input_perm=None, client=0):
    """Neuron bundle of weighted layer ``n`` after aligning its inputs by ``input_perm``."""
    if input_perm is not None and not input_perm.is_identity:
        if n == 1 and input_perm.global_size != input_perm.local_size:
            raise DimensionError("the network input cannot be widened")
        pos = model.position(n)
        layer, params = permute_layer_in(model.layers[pos], model.params[pos], input_perm)
    else:
        pos = model.position(n)
        layer, params = model.layers[pos], model.params[pos]
    vectors, recurrent = neurons_of(layer, params)
    return NeuronBundle(vectors, layer, client=client, layer_index=n, recurrent=recurrent)


# ---------------------------------------------------------------- selection

def _gather_gates(arr, idx, gates, axis):
    parts = np.split(arr, gates, axis=axis)
    return np.concatenate([np.take(p, idx, axis=axis) for p in parts], axis=axis)


def select_layer_out(layer, params, idx):
    """Keep output units ``idx`` (in that order); the adjoint of :func:`permute_layer_out`."""
    idx = np.asarray(idx, dtype=np.int64)
    if isinstance(layer, (Dense, Conv2d)):
        new = {"weight": params["weight"][..., idx].copy(), "bias": params["bias"][idx].copy()}
    elif isinstance(layer, Embedding):
        new = {"weight": params["weight"][:, idx].copy()}
    elif isinstance(layer, Lstm):
        g = layer.gates
        w_hh = _gather_gates(params["w_hh"], idx, g, 1)[idx]
        new = {"w_ih": _gather_gates(params["w_ih"], idx, g, 1), "w_hh": w_hh,
               "bias": _gather_gates(params["bias"], idx, g, 0)}
    else:
        raise NoNeuronsError(f"{layer.kind} layers carry no neurons")
    return layer.resized(out_units=len(idx)), new


def select_layer_in(layer, params, idx, units):
    """Keep input units ``idx`` out of ``units``; the adjoint of :func:`permute_layer_in`."""
    idx = np.asarray(idx, dtype=np.int64)
    if isinstance(layer, Dense):
        w = params["weight"]
        group, rem = divmod(w.shape[0], units)
        if rem:
            raise DimensionError(f"dense layer with {w.shape[0]} inputs cannot come from {units} units")
        rows = (idx[:, None] * group + np.arange(group)[None, :]).reshape(-1)
        return layer.resized(in_units=len(rows)), {"weight": w[rows].copy(), "bias": params["bias"].copy()}
    if isinstance(layer, (Conv2d, Lstm)):
        key = "weight" if isinstance(layer, Conv2d) else "w_ih"
        new = {k: v.copy() for k, v in params.items()}
        new[key] = params[key][idx].copy()
        return layer.resized(in_units=len(idx)), new
    if isinstance(layer, Embedding):
        raise DimensionError("embedding inputs are symbol ids and cannot be selected")
    raise NoNeuronsError(f"{layer.kind} layers carry no neurons")


def restrict_network(model, perms):
    """Local model read off a wider one: hidden layer ``n`` keeps the slots ``perms[n - 1]`` maps to.

    This undoes :func:`permute_network` exactly when every padded slot is a
    dummy, and otherwise drops the slots the assignments do not reach.
    """
    if len(perms) != model.depth - 1:
        raise DimensionError(f"need {model.depth - 1} assignments, got {len(perms)}")
    layers, plist = list(model.layers), [dict(p) for p in model.params]
    prev = None
    for n in range(1, model.depth + 1):
        pos = model.position(n)
        layer, params = layers[pos], plist[pos]
        if prev is not None:
            layer, params = select_layer_in(layer, params, prev.mapping, prev.global_size)
        if n < model.depth:
            perm = perms[n - 1]
            if perm.global_size != layer.out_units:
                raise DimensionError(
                    f"assignment for layer {n} targets {perm.global_size} slots, layer has {layer.out_units}")
            layer, params = select_layer_out(layer, params, perm.mapping)
            prev = perm
        layers[pos], plist[pos] = layer, params
    return NetworkModel(layers, plist, model.input_shape)
