import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdlnet.serialize import ContainerError, dumps, load, loads, save


def test_round_trip_mixed_dtypes(tmp_path):
    arrays = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b.weight": np.linspace(-1, 1, 5),
        "counts": np.array([3, -1, 7], dtype=np.int64),
        "scalar": np.float64(2.5) * np.ones(()),
    }
    save(tmp_path / "p.bin", arrays)
    back = load(tmp_path / "p.bin")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].shape == arrays[k].shape
        assert np.array_equal(back[k], arrays[k])


def test_layout_is_little_endian():
    buf = dumps({"x": np.array([1.0], dtype=np.float64)})
    assert buf[:4] == b"HDLP"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<H", buf, 12) == (1,)
    assert buf[14:15] == b"x"
    assert buf[15] == 1 and buf[16] == 1  # float64, rank 1
    assert struct.unpack_from("<I", buf, 17) == (1,)
    assert buf[21:] == struct.pack("<d", 1.0)


def test_order_determines_bytes():
    a = {"x": np.zeros(2), "y": np.ones(2)}
    b = {"y": np.ones(2), "x": np.zeros(2)}
    assert dumps(a) == dumps(dict(a))
    assert dumps(a) != dumps(b)


def test_non_contiguous_input():
    m = np.arange(12, dtype=np.float32).reshape(3, 4).T
    assert np.array_equal(loads(dumps({"m": m}))["m"], m)


def test_unsupported_dtype():
    with pytest.raises(ContainerError):
        dumps({"x": np.zeros(2, dtype=np.int8)})


@pytest.mark.parametrize(
    "buf",
    [b"", b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00", b"HDLP\x02\x00\x00\x00\x00\x00\x00\x00"],
)
def test_bad_header(buf):
    with pytest.raises(ContainerError):
        loads(buf)


def test_truncated_and_trailing():
    buf = dumps({"x": np.arange(4.0)})
    with pytest.raises(ContainerError):
        loads(buf[:-1])
    with pytest.raises(ContainerError):
        loads(buf + b"\x00")


@settings(max_examples=50, deadline=None)
@given(
    shapes=st.lists(st.lists(st.integers(0, 4), max_size=3), min_size=1, max_size=4),
    seed=st.integers(0, 2**16),
)
def test_round_trip_property(shapes, seed):
    rng = np.random.default_rng(seed)
    arrays = {f"t{i}": rng.standard_normal(s) for i, s in enumerate(shapes)}
    back = loads(dumps(arrays))
    assert all(np.array_equal(back[k], v) for k, v in arrays.items())
    assert dumps(back) == dumps(arrays)
