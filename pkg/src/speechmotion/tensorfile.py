"""Reader/writer for the MTF/1 binary tensor format.

Layout: 8 magic bytes ``MAGITNS1``, one dtype tag byte (0 = 32-bit
little-endian float), one rank byte, ``rank`` 8-byte little-endian unsigned
dimensions, then the row-major payload. Used to persist mel spectrograms,
motion sequences, contours, and model parameters.
"""

import struct
from typing import BinaryIO

import numpy as np

from .errors import InvalidInputError

MAGIC = b"MAGITNS1"
DTYPE_FLOAT32 = 0

_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4")}


def write_tensor(f: BinaryIO, array: np.ndarray) -> None:
    """Append one MTF/1 record for ``array`` (converted to float32) to ``f``."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim < 1:
        arr = arr.reshape(1)
    f.write(MAGIC)
    f.write(struct.pack("<BB", DTYPE_FLOAT32, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    """Read one MTF/1 record from the current position of ``f``."""
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise InvalidInputError(f"bad MTF/1 magic: {magic!r}")
    header = f.read(2)
    if len(header) != 2:
        raise InvalidInputError("truncated MTF/1 header")
    dtype_tag, rank = struct.unpack("<BB", header)
    if dtype_tag not in _DTYPES:
        raise InvalidInputError(f"unknown MTF/1 dtype tag {dtype_tag}")
    dims_raw = f.read(8 * rank)
    if len(dims_raw) != 8 * rank:
        raise InvalidInputError("truncated MTF/1 dimension list")
    shape = struct.unpack(f"<{rank}Q", dims_raw)
    count = int(np.prod(shape)) if rank else 1
    payload = f.read(count * 4)
    if len(payload) != count * 4:
        raise InvalidInputError("truncated MTF/1 payload")
    return np.frombuffer(payload, dtype=_DTYPES[dtype_tag]).reshape(shape).copy()


def save(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
