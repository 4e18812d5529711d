"""Single-volume file format: JSON header, NUL fence, raw buffer.

Layout: one UTF-8 JSON object on the first line holding dims, dtype
("f32" or "u8"), spacing and a free-form name, terminated by b"\\n\\x00",
followed by exactly prod(dims) scalars little-endian in row-major order.
Reads validate the fence, the dtype tag and the byte count, so truncated
or foreign files fail loudly instead of yielding partial data.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_FENCE = b"\n\x00"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeFormatError(IOError):
    pass


def write_volume(path, volume: np.ndarray, spacing=(1.0, 1.0, 1.0),
                 name: str = "") -> None:
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise VolumeFormatError(f"expected a 3-D volume, got {volume.shape}")
    if volume.dtype == np.uint8:
        tag = "u8"
    elif volume.dtype in (np.float32, np.dtype("<f4")):
        tag = "f32"
    else:
        raise VolumeFormatError(f"unsupported dtype {volume.dtype}; "
                                "convert to f32 or u8 first")
    header = json.dumps({
        "dims": list(volume.shape), "dtype": tag,
        "spacing": [float(s) for s in spacing], "name": name},
        sort_keys=True).encode()
    buf = np.ascontiguousarray(volume, dtype=_DTYPES[tag]).tobytes()
    Path(path).write_bytes(header + _FENCE + buf)


def read_volume(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    cut = raw.find(_FENCE)
    if cut < 0:
        raise VolumeFormatError(f"{path}: missing header fence")
    try:
        meta = json.loads(raw[:cut].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"{path}: bad header ({e})") from None
    for key in ("dims", "dtype", "spacing", "name"):
        if key not in meta:
            raise VolumeFormatError(f"{path}: header lacks '{key}'")
    if meta["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype tag {meta['dtype']!r}")
    dims = tuple(int(d) for d in meta["dims"])
    dt = _DTYPES[meta["dtype"]]
    body = raw[cut + len(_FENCE):]
    expected = int(np.prod(dims)) * dt.itemsize
    if len(body) != expected:
        raise VolumeFormatError(
            f"{path}: buffer holds {len(body)} bytes, header implies "
            f"{expected}")
    vol = np.frombuffer(body, dtype=dt).reshape(dims)
    return vol.copy(), meta
