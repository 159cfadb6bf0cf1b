"""Writer for the engine's binary embedding format.

Layout (little-endian): magic "FDDEMB01" | version u32 | n u64 | d u32 |
dtype u8 (0 = float32) | 7 reserved bytes | id_table_offset u64 | payload of
n*d float32 row-major | id table of n entries [len u32 | UTF-8 bytes].

This is an independent implementation of the published byte layout; the
engine remains the authority on reading and normalization.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ValidationError

MAGIC = b"FDDEMB01"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<8sIQIB7xQ")


def write_embedding_file(path, ids: Sequence[str], rows: np.ndarray) -> None:
    """Write rows (any float dtype) with their ids; validates invariants first."""
    rows = np.ascontiguousarray(np.asarray(rows, dtype="<f4"))
    if rows.ndim != 2 or rows.shape[1] == 0:
        raise ValidationError(f"rows must be 2-D with d > 0, got shape {rows.shape}")
    ids = [str(i) for i in ids]
    if len(ids) != rows.shape[0]:
        raise ValidationError(f"{len(ids)} ids for {rows.shape[0]} rows")
    if len(set(ids)) != len(ids):
        raise ValidationError("ids are not unique")
    if not np.all(np.isfinite(rows)):
        raise ValidationError("rows contain non-finite values")
    if rows.shape[0] and not np.all(np.linalg.norm(rows.astype(np.float64), axis=1) > 0):
        raise ValidationError("zero-norm row cannot be embedded")

    n, d = rows.shape
    payload = rows.tobytes()
    header = _HEADER.pack(MAGIC, VERSION, n, d, DTYPE_F32, _HEADER.size + len(payload))
    parts = [header, payload]
    for sample_id in ids:
        encoded = sample_id.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
    Path(path).write_bytes(b"".join(parts))


def read_embedding_file(path) -> tuple[list[str], np.ndarray]:
    """Read back a file this module wrote (self-check before exit)."""
    data = Path(path).read_bytes()
    magic, version, n, d, dtype, offset = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION or dtype != DTYPE_F32:
        raise ValidationError(f"{path}: unrecognized header")
    if offset != _HEADER.size + n * d * 4 or len(data) < offset:
        raise ValidationError(f"{path}: truncated or inconsistent payload")
    rows = np.frombuffer(data, dtype="<f4", count=n * d, offset=_HEADER.size)
    rows = rows.reshape(n, d)
    ids = []
    cursor = offset
    for _ in range(n):
        (length,) = struct.unpack_from("<I", data, cursor)
        cursor += 4
        ids.append(data[cursor : cursor + length].decode("utf-8"))
        cursor += length
    return ids, rows
