"""Binary checkpoint container ("FMA1").

Layout, all integers little-endian::

    b"FMA1"
    u64 entry count
    per entry:
        u64 name length, UTF-8 name
        u64 rank, rank x u64 extents
        prod(extents) x f64 values (row-major)

Entry names encode the architecture: ``"<pos>:<kind>(<k>=<v>,...).<tensor>"``.
A parameter-free layer is stored as one empty entry named ``.none`` so that
every layer appears in order.  The first entry also carries the network input
shape, ``"0:<kind>(...)@<d0>x<d1>.<tensor>"`` (``N`` marks a free extent).
"""
from __future__ import annotations

import io
import re
import struct
from dataclasses import fields

import numpy as np

from ..errors import FormatError
from .layers import LAYER_TYPES
from .network import NetworkModel

MAGIC = b"FMA1"
_NAME = re.compile(r"^(\d+):(\w+)\(([^)]*)\)(?:@([\dxN]+))?\.(\w+)$")


def _layer_signature(layer):
    parts = []
    for f in fields(layer):
        v = getattr(layer, f.name)
        parts.append(f"{f.name}={'' if v is None else v}")
    return f"{layer.kind}({','.join(parts)})"


def _parse_value(text):
    if text == "":
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _encode_shape(shape):
    return "x".join("N" if d is None else str(d) for d in shape) or "0"


def _decode_shape(text):
    if text == "0":
        return ()
    return tuple(None if d == "N" else int(d) for d in text.split("x"))


def entries(model):
    out = []
    for pos, (layer, params) in enumerate(zip(model.layers, model.params)):
        sig = _layer_signature(layer)
        suffix = f"@{_encode_shape(model.input_shape)}" if pos == 0 else ""
        if not params:
            out.append((f"{pos}:{sig}{suffix}.none", np.zeros(0)))
        for name, arr in params.items():
            out.append((f"{pos}:{sig}{suffix}.{name}", arr))
            suffix = ""
    return out


def dumps(model: NetworkModel) -> bytes:
    buf = io.BytesIO()
    items = entries(model)
    buf.write(MAGIC)
    buf.write(struct.pack("<Q", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> NetworkModel:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("not an FMA1 checkpoint")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(view):
            raise FormatError("truncated checkpoint")
        chunk = view[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    layers, params, input_shape = [], [], None
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        m = _NAME.match(name)
        if not m:
            raise FormatError(f"malformed entry name {name!r}")
        pos, kind, args, shape_text, tensor = m.groups()
        pos = int(pos)
        if shape_text is not None:
            input_shape = _decode_shape(shape_text)
        if pos == len(layers):
            if kind not in LAYER_TYPES:
                raise FormatError(f"unknown layer kind {kind!r}")
            kwargs = {}
            for part in filter(None, args.split(",")):
                key, _, val = part.partition("=")
                kwargs[key] = _parse_value(val)
            layers.append(LAYER_TYPES[kind](**kwargs))
            params.append({})
        elif pos != len(layers) - 1:
            raise FormatError(f"entry {name!r} out of order")
        if tensor != "none":
            params[pos][tensor] = values
    if off != len(view):
        raise FormatError("trailing bytes after checkpoint")
    if input_shape is None:
        raise FormatError("checkpoint carries no input shape")
    return NetworkModel(layers, params, input_shape)


def save(model, path):
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
