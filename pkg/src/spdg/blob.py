"""Binary tensor blob format shared by checkpoints and datasets.

Layout, all little-endian:
    magic   4 bytes  b"SPDG"
    version u32      currently 1
    dtype   u8       0 = float64, 1 = float32
    rank    u8
    dims    rank * u64
    values  raw little-endian floats, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SPDG"
FORMAT_VERSION = 1

_DTYPE_FLAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_FLAG_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def write_blob(path, array: np.ndarray) -> None:
    # keep rank-0 as rank-0 (ascontiguousarray would promote it to 1-d)
    arr = np.asarray(array, order="C")
    if arr.dtype not in _FLAG_FOR:
        raise FormatError(f"blob supports float64/float32, got {arr.dtype}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<BB", _FLAG_FOR[arr.dtype], arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_blob(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported blob version {version}")
    flag, rank = struct.unpack_from("<BB", raw, 8)
    if flag not in _DTYPE_FLAGS:
        raise FormatError(f"{path}: unknown dtype flag {flag}")
    dtype = _DTYPE_FLAGS[flag]
    offset = 10
    shape = []
    for _ in range(rank):
        (dim,) = struct.unpack_from("<Q", raw, offset)
        shape.append(int(dim))
        offset += 8
    count = int(np.prod(shape)) if shape else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected} bytes for shape {tuple(shape)}, got {len(raw)}"
        )
    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return values.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
