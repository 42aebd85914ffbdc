"""PGT1 binary tensor container.

Layout (all integers little-endian)::

    b"PGT1" | u32 count | count x (u16 name_len | utf-8 name | u8 rank |
                                   rank x u32 dim | prod(dims) x f64 row-major)
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PGT1"


class ContainerError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ContainerError(f"tensor {name!r}: name or rank too large")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ContainerError("bad magic: not a PGT1 container")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ContainerError("truncated container")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if pos + name_len > len(blob):
            raise ContainerError("truncated container")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) * 8
        if pos + size > len(blob):
            raise ContainerError(f"truncated data for tensor {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=pos).reshape(dims).astype(np.float64)
        pos += size
    if pos != len(blob):
        raise ContainerError("trailing bytes after last tensor")
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    try:
        path.write_bytes(dumps(tensors))
    except OSError as exc:
        raise OSError(f"cannot write tensor container {path}: {exc}") from exc


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor container {path}: {exc}") from exc
    return loads(blob)
