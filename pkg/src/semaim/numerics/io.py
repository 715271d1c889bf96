"""Raw tensor files: ``SEMT`` magic, u32 rank, u32 extents, u8 dtype code, payload.

All integers and the payload are little-endian. Dtype code 0 is float32,
1 is float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from semaim.errors import ContractError

MAGIC = b"SEMT"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_tensor(array) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODE_OF:
        raise ContractError(f"cannot serialize dtype {array.dtype}")
    code = _CODE_OF[array.dtype]
    header = MAGIC + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", code)
    return header + np.ascontiguousarray(array, dtype=_CODES[code]).tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ContractError("not a SEMT tensor file (bad magic)")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    offset = 8
    shape = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    (code,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    if code not in _CODES:
        raise ContractError(f"unknown SEMT dtype code {code}")
    dtype = _CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - offset != count * dtype.itemsize:
        raise ContractError(f"SEMT payload size mismatch for shape {tuple(shape)}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
