"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    b"RPFZ1"  u32 version
    u32 record count
    per record:
        u32 name length, UTF-8 name
        u8 dtype tag, u32 rank, rank x u64 extents
        raw little-endian values
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"RPFZ1"
VERSION = 1

_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_TAG_OF = {v.str: k for k, v in _TAGS.items()}


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
        tag = _TAG_OF.get(le.str)
        if tag is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:5]!r}")
    off = 5

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise FormatError(f"{path}: truncated at byte {off}")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<I")
        name = buf[off : off + n].decode("utf-8")
        off += n
        tag, rank = take("<BI")
        if tag not in _TAGS:
            raise FormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        shape = take(f"<{rank}Q") if rank else ()
        dt = _TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(buf):
            raise FormatError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
        off += nbytes
    return out
