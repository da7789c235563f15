"""Binary checkpoint format.

    b"KBRN" | u32 version | u32 count |
    count x (u16 name_len | name utf-8 | u8 ndim | ndim x u32 dims | float32 values)

All integers and floats little-endian; values row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"KBRN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic: not a KBRN checkpoint")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint: {e}") from e
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after tensor table")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
