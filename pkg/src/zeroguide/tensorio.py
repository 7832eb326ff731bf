"""Reader/writer for the ZGTR tensor container.

Layout (little-endian)::

    b"ZGTR" | u32 version | u32 entry count
    per entry: u16 key length | UTF-8 key | u8 rank | rank x u32 dims | float32 data (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ZGTR"
VERSION = 1


class ContainerError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for key, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw_key = key.encode("utf-8")
        if len(raw_key) > 0xFFFF:
            raise ContainerError(f"key too long: {key[:40]}...")
        if arr.ndim > 0xFF:
            raise ContainerError(f"rank {arr.ndim} too large for {key!r}")
        parts.append(struct.pack("<H", len(raw_key)))
        parts.append(raw_key)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ContainerError("not a ZGTR container (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported ZGTR version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            key = buf[pos:pos + klen].decode("utf-8")
            pos += klen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise ContainerError(f"truncated data for {key!r}")
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            if key in out:
                raise ContainerError(f"duplicate key {key!r}")
            out[key] = arr.astype(np.float32)
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from exc
    if pos != len(buf):
        raise ContainerError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
