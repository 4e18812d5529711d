"""Checkpoint container: named float32 arrays in one binary file.

Layout (all integers little-endian):

    magic  b"MSEG"
    u32    format version (currently 1)
    u32    entry count
    entry* u32 name length, name utf-8,
           u32 ndim, u32 extent per axis,
           raw little-endian f32 buffer (prod(extents) values)

Entries are written in sorted name order, so identical state produces
byte-identical files. Readers validate magic, version and every length,
failing on truncation instead of returning partial state.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSEG"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, entries: dict) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        buf = take(4 * n)
        entries[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return entries
