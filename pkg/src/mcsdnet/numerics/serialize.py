"""Little-endian binary tensor records.

Layout of one record::

    magic      4 bytes   b"MCTB"
    dtype      uint8     1 = float32, 2 = float64
    rank       uint8
    shape      rank x uint64
    data       prod(shape) elements, little-endian, row-major
"""
from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"MCTB"
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed or truncated binary record."""


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated record: wanted {n} bytes, got {len(buf)}")
    return buf


def write_array(fp: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    fp.write(MAGIC)
    fp.write(struct.pack("<BB", code, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_array(fp: BinaryIO) -> np.ndarray:
    magic = _read_exact(fp, 4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(fp, 2))
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank))
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fp, count * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="), copy=True)


def save_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fp:
        write_array(fp, arr)


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_array(fp)
