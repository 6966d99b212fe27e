"""Writer for the CIRE embedding container consumed by the retrieval toolkit.

Layout (little-endian): magic "CIRE", version u16=1, row count u64, dim
u32, dtype u8=1 (f32), 9 reserved zero bytes; row-major f32 data; then per
row a u16 byte length + UTF-8 id. Canonical: identical inputs produce
identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CIRE"
VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sHQIB9s")


class CireError(ValueError):
    pass


def write_cire(ids, data: np.ndarray, path) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    ids = [str(s) for s in ids]
    if data.ndim != 2:
        raise CireError(f"expected 2-D data, got shape {data.shape}")
    if len(ids) != data.shape[0]:
        raise CireError(f"{len(ids)} ids for {data.shape[0]} rows")
    if len(set(ids)) != len(ids):
        raise CireError("duplicate ids in export")
    if not np.isfinite(data).all():
        raise CireError("non-finite values in export")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, data.shape[0], data.shape[1],
                              DTYPE_F32, b"\x00" * 9))
        fh.write(data.tobytes())
        for item in ids:
            raw = item.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CireError(f"id too long: {len(raw)} bytes")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
