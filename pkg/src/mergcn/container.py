"""MERT tensor container: a flat, versioned, little-endian file of named arrays.

Layout::

    b"MERT" | u32 version (=1) | u32 entry count
    per entry: u16 name length | UTF-8 name | u32 ndim | u64 dims[ndim] | f64 data[prod(dims)]
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

MAGIC = b"MERT"
VERSION = 1

PathLike = Union[str, os.PathLike]


class ContainerError(ValueError):
    pass


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"entry name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f8")
        if a.ndim == 0:
            a = a.reshape(1)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    if bytes(view[:4]) != MAGIC:
        raise ContainerError("not a MERT container (bad magic)")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise ContainerError(f"unsupported MERT version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            n = int(np.prod(dims)) if ndim else 1
            if pos + 8 * n > len(view):
                raise ContainerError(f"entry {name!r} is truncated")
            arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            if name in out:
                raise ContainerError(f"duplicate entry {name!r}")
            out[name] = arr.reshape(dims)
    except struct.error as exc:
        raise ContainerError(f"truncated MERT container: {exc}") from None
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save(path: PathLike, entries: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(entries))


def load(path: PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
