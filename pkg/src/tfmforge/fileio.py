"""TFT1 binary tensor files.

Layout: magic ``TFT1``; u8 dtype code (1 = float32, 2 = float64); u8 rank;
two zero pad bytes; rank little-endian u32 extents; row-major little-endian
payload.  File size is therefore 8 + 4*rank + itemsize*prod(extents).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TFT1"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_MAX_ELEMENTS = 1 << 48


class TensorFileError(ValueError):
    pass


def write_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise TensorFileError(f"unsupported dtype {array.dtype}; use float32/float64")
    header = MAGIC + struct.pack("<BBxx", _CODES[array.dtype], array.ndim)
    extents = struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(extents)
        fh.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    return tensor_from_bytes(data, name=str(path))


def tensor_from_bytes(data: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(data) < 8:
        raise TensorFileError(f"{name}: truncated header ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise TensorFileError(f"{name}: bad magic at offset 0, expected {MAGIC!r}")
    code, rank = struct.unpack_from("<BBxx", data, 4)
    if code not in _DTYPES:
        raise TensorFileError(f"{name}: unknown dtype code {code}")
    if len(data) < 8 + 4 * rank:
        raise TensorFileError(f"{name}: truncated extent table")
    shape = struct.unpack_from(f"<{rank}I", data, 8)
    count = 1
    for e in shape:
        if e == 0:
            raise TensorFileError(f"{name}: zero extent in shape {shape}")
        count *= e
        if count > _MAX_ELEMENTS:
            raise TensorFileError(f"{name}: extent overflow in shape {shape}")
    dtype = _DTYPES[code]
    expected = 8 + 4 * rank + dtype.itemsize * count
    if len(data) != expected:
        raise TensorFileError(
            f"{name}: payload length {len(data)} != expected {expected} for shape {shape}")
    payload = np.frombuffer(data, dtype=dtype, count=count, offset=8 + 4 * rank)
    return payload.reshape(shape).astype(dtype.newbyteorder("="))


def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise TensorFileError(f"unsupported dtype {array.dtype}; use float32/float64")
    return (MAGIC + struct.pack("<BBxx", _CODES[array.dtype], array.ndim)
            + struct.pack(f"<{array.ndim}I", *array.shape)
            + np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())
