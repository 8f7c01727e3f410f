"""Little-endian binary tensor files and named parameter tables.

Tensor layout::

    b"DIMT" | version u32 | rank u32 | dims u32[rank] | dtype u8 | raw data

A parameter table is ``b"DIMP" | version u32 | count u32`` followed by
``count`` entries of ``name_len u32 | utf-8 name | tensor``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"DIMT"
TABLE_MAGIC = b"DIMP"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class FormatError(ValueError):
    pass


def write_tensor(f: BinaryIO, arr) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<II", VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(struct.pack("<B", code))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated tensor data")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    (code,) = struct.unpack("<B", _read_exact(f, 1))
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    n = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(f, n * dt.itemsize), dtype=dt)
    return data.reshape(dims).astype(dt.newbyteorder("="))


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_table(path, table: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(TABLE_MAGIC)
        f.write(struct.pack("<II", VERSION, len(table)))
        for name, arr in table.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            write_tensor(f, arr)


def load_table(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != TABLE_MAGIC:
            raise FormatError("bad parameter table magic")
        version, count = struct.unpack("<II", _read_exact(f, 8))
        if version != VERSION:
            raise FormatError(f"unsupported table version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, n).decode("utf-8")
            out[name] = read_tensor(f)
        return out
