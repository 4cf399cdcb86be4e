"""Flat archive of named float64 arrays.

Layout (everything little-endian):

    magic "CODI" | u32 version | u32 record count |
    per record: u32 name length | name utf-8 | u32 ndim | u32*ndim dims |
                float64 values (row-major)

Round-trips are byte-exact; record order is preserved.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"CODI"
VERSION = 1


def write_archive(path, records) -> None:
    """records: iterable of (name, array-like); order is preserved on disk."""
    items = [(name, np.ascontiguousarray(arr, dtype="<f8")) for name, arr in records]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, arr in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_archive(path) -> dict:
    """Returns an insertion-ordered {name: float64 array} dict."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    out = {}
    ofs = 12
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, ofs)
        ofs += 4
        name = blob[ofs : ofs + nlen].decode("utf-8")
        ofs += nlen
        (ndim,) = struct.unpack_from("<I", blob, ofs)
        ofs += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, ofs)
        ofs += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=ofs).reshape(shape)
        ofs += 8 * n
        out[name] = arr.astype(np.float64)
    if ofs != len(blob):
        raise DataError(f"{path}: {len(blob) - ofs} trailing bytes")
    return out
