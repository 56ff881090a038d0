import struct

import numpy as np
import pytest

from fedma.errors import FormatError
from fedma.nn import char_lstm, checkpoint, forward, lenet, mlp, vgg9
from fedma.nn.layers import Dropout

from conftest import params_equal


@pytest.mark.parametrize("make", [lambda: lenet(seed=3), lambda: char_lstm(80, 8, 16, seed=1),
                                  lambda: vgg9(seed=2), lambda: mlp(5, [4, 3], 2, activation="tanh")])
def test_round_trip_is_bit_exact(make, tmp_path):
    model = make()
    path = tmp_path / "m.fma"
    checkpoint.save(model, path)
    back = checkpoint.load(path)
    assert back.layers == model.layers
    assert back.input_shape == model.input_shape
    assert params_equal(back, model)
    assert checkpoint.dumps(back) == path.read_bytes()


def test_header_layout():
    model = mlp(3, [2], 2)
    raw = checkpoint.dumps(model)
    assert raw[:4] == b"FMA1"
    (count,) = struct.unpack("<Q", raw[4:12])
    assert count == 4                       # weight and bias for each dense layer
    (nlen,) = struct.unpack("<Q", raw[12:20])
    name = raw[20:20 + nlen].decode("utf-8")
    assert name.startswith("0:dense(") and "@3." in name and name.endswith(".weight")
    off = 20 + nlen
    rank, d0, d1 = struct.unpack("<3Q", raw[off:off + 24])
    assert (rank, d0, d1) == (2, 3, 2)
    values = np.frombuffer(raw[off + 24:off + 24 + 48], dtype="<f8").reshape(3, 2)
    np.testing.assert_array_equal(values, model.params[0]["weight"])


def test_parameter_free_layers_are_kept_in_order():
    model = vgg9()
    back = checkpoint.loads(checkpoint.dumps(model))
    assert [type(layer) for layer in back.layers] == [type(layer) for layer in model.layers]
    assert any(isinstance(layer, Dropout) for layer in back.layers)
    x = np.random.default_rng(0).normal(size=(1, 3, 32, 32))
    np.testing.assert_array_equal(forward(back, x), forward(model, x))


def test_bad_magic_truncation_and_trailing_bytes():
    raw = checkpoint.dumps(mlp(3, [2], 2))
    with pytest.raises(FormatError):
        checkpoint.loads(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        checkpoint.loads(raw[:-3])
    with pytest.raises(FormatError):
        checkpoint.loads(raw + b"\x00")
