"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"HBF1" | version | entry count | entries... | CRC32 of everything before it

and each entry is ``name length | UTF-8 name | rank | dims... | float32 LE payload``.
Entries keep the order they were given in, so saving what was loaded
reproduces the file byte for byte.
"""

from __future__ import annotations

import os
import struct
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"HBF1"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Corrupt, truncated or unrecognized checkpoint data."""


def to_bytes(state) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(state))]
    for name, value in state.items():
        arr = np.asarray(value)
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def from_bytes(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 16:
        raise CheckpointError(f"checkpoint truncated: only {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = blob[:-4], _U32.unpack(blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt or truncated")
    (version,) = _U32.unpack_from(body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = _U32.unpack_from(body, 8)
    pos = 12
    out: OrderedDict[str, np.ndarray] = OrderedDict()

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("checkpoint truncated inside an entry")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = _U32.unpack(take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = _U32.unpack(take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last entry")
    return out


def save(path, state) -> None:
    """Write atomically: an interrupted save never replaces a good file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(state))
    os.replace(tmp, path)


def load(path) -> "OrderedDict[str, np.ndarray]":
    return from_bytes(Path(path).read_bytes())
