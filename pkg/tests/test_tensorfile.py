import io
import struct

import numpy as np
import pytest

from speechmotion import tensorfile
from speechmotion.errors import InvalidInputError


def test_roundtrip_2d(tmp_path):
    arr = np.random.default_rng(0).standard_normal((7, 5)).astype(np.float32)
    tensorfile.save(tmp_path / "a.mtf", arr)
    back = tensorfile.load(tmp_path / "a.mtf")
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_roundtrip_1d_and_3d(tmp_path):
    for shape in [(11,), (2, 3, 4)]:
        arr = np.arange(np.prod(shape), dtype=np.float32).reshape(shape)
        tensorfile.save(tmp_path / "b.mtf", arr)
        assert np.array_equal(tensorfile.load(tmp_path / "b.mtf"), arr)


def test_exact_byte_layout():
    arr = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    buf = io.BytesIO()
    tensorfile.write_tensor(buf, arr)
    raw = buf.getvalue()
    assert raw[:8] == b"MAGITNS1"
    assert raw[8] == 0  # float32 tag
    assert raw[9] == 2  # rank
    assert struct.unpack("<2Q", raw[10:26]) == (2, 2)
    assert raw[26:] == arr.tobytes(order="C")


def test_multiple_records_in_one_stream():
    a = np.ones((2, 2), dtype=np.float32)
    b = np.zeros(3, dtype=np.float32)
    buf = io.BytesIO()
    tensorfile.write_tensor(buf, a)
    tensorfile.write_tensor(buf, b)
    buf.seek(0)
    assert np.array_equal(tensorfile.read_tensor(buf), a)
    assert np.array_equal(tensorfile.read_tensor(buf), b)


def test_bad_magic_rejected():
    buf = io.BytesIO(b"NOTMAGIC" + bytes(10))
    with pytest.raises(InvalidInputError):
        tensorfile.read_tensor(buf)


def test_truncated_payload_rejected():
    buf = io.BytesIO()
    tensorfile.write_tensor(buf, np.ones(4, dtype=np.float32))
    raw = buf.getvalue()[:-4]
    with pytest.raises(InvalidInputError):
        tensorfile.read_tensor(io.BytesIO(raw))


def test_unknown_dtype_tag_rejected():
    buf = io.BytesIO()
    tensorfile.write_tensor(buf, np.ones(1, dtype=np.float32))
    raw = bytearray(buf.getvalue())
    raw[8] = 9
    with pytest.raises(InvalidInputError):
        tensorfile.read_tensor(io.BytesIO(bytes(raw)))
