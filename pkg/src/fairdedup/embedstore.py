"""Binary embedding store shared by every pipeline stage.

Layout (all integers little-endian):

    magic "FDDEMB01" (8 bytes) | version u32 | n u64 | d u32 | dtype u8
    (0 = float32) | 7 reserved bytes | id_table_offset u64 | payload of
    n*d float32 (row-major) | id table of n entries [len u32 | UTF-8 bytes]

Rows are L2-normalized on read; producers are not trusted to normalize.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"FDDEMB01"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<8sIQIB7xQ")
HEADER_SIZE = _HEADER.size  # 40 bytes

# Rows must be unit within this tolerance once loaded.
UNIT_TOL = 1e-4
# Rows already unit within this much are left untouched, which makes
# normalization idempotent at float32 precision (write -> read is identity).
_SKIP_TOL = 1e-6


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    """Return float32 copy of ``rows`` with each row L2-normalized.

    Rows whose norm is already within ``_SKIP_TOL`` of 1 are copied bit-for-bit.
    Raises ValidationError on zero-norm rows.
    """
    rows = np.asarray(rows)
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    if rows.shape[0] and not np.all(norms > 0.0):
        raise ValidationError("zero-norm row cannot be normalized")
    out = rows.astype(np.float32, copy=True)
    adjust = np.abs(norms - 1.0) > _SKIP_TOL
    if adjust.any():
        scaled = rows[adjust].astype(np.float64) / norms[adjust, None]
        out[adjust] = scaled.astype(np.float32)
    return np.ascontiguousarray(out)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """n unit-norm float32 rows with stable string ids."""

    ids: tuple[str, ...]
    rows: np.ndarray

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def create(cls, ids: Sequence, rows: np.ndarray) -> "EmbeddingMatrix":
        """Validate and normalize raw rows; integer ids are stringified."""
        rows = np.asarray(rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ValidationError(f"rows must be 2-D, got shape {rows.shape}")
        if rows.shape[1] == 0:
            raise ValidationError("embedding dimension must be positive")
        str_ids = tuple(str(i) for i in ids)
        if len(str_ids) != rows.shape[0]:
            raise ValidationError(
                f"{len(str_ids)} ids for {rows.shape[0]} rows"
            )
        if len(set(str_ids)) != len(str_ids):
            raise ValidationError("ids are not unique")
        if not np.all(np.isfinite(rows)):
            raise ValidationError("rows contain non-finite values")
        return cls(ids=str_ids, rows=normalize_rows(rows))

    def validate(self) -> None:
        """Re-check the type invariants (used before writing to disk)."""
        if self.rows.ndim != 2 or self.rows.dtype != np.float32:
            raise ValidationError("rows must be a 2-D float32 array")
        if self.d == 0:
            raise ValidationError("embedding dimension must be positive")
        if len(self.ids) != self.n:
            raise ValidationError("id count does not match row count")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("ids are not unique")
        if not np.all(np.isfinite(self.rows)):
            raise ValidationError("rows contain non-finite values")
        if self.n:
            norms = np.linalg.norm(self.rows.astype(np.float64), axis=1)
            if np.abs(norms - 1.0).max() > UNIT_TOL:
                raise ValidationError("rows are not unit-norm")


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    """Write ``matrix`` so that ``read_embeddings`` reproduces it bit-for-bit."""
    matrix.validate()
    payload = np.ascontiguousarray(matrix.rows, dtype="<f4").tobytes()
    id_table_offset = HEADER_SIZE + len(payload)
    header = _HEADER.pack(
        MAGIC, VERSION, matrix.n, matrix.d, DTYPE_F32, id_table_offset
    )
    parts = [header, payload]
    for sample_id in matrix.ids:
        encoded = sample_id.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path) -> EmbeddingMatrix:
    """Load, validate and normalize an embedding file."""
    data = Path(path).read_bytes()
    if len(data) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d, dtype, id_table_offset = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype tag {dtype}")
    payload_len = n * d * 4
    if id_table_offset != HEADER_SIZE + payload_len:
        raise FormatError(f"{path}: id table offset inconsistent with n*d")
    if len(data) < id_table_offset:
        raise FormatError(f"{path}: truncated payload")
    if d == 0:
        raise ValidationError(f"{path}: embedding dimension must be positive")

    raw = np.frombuffer(
        data, dtype="<f4", count=n * d, offset=HEADER_SIZE
    ).reshape(n, d)
    if not np.all(np.isfinite(raw)):
        raise ValidationError(f"{path}: payload contains non-finite values")

    ids = []
    cursor = id_table_offset
    for _ in range(n):
        if cursor + 4 > len(data):
            raise FormatError(f"{path}: truncated id table")
        (length,) = struct.unpack_from("<I", data, cursor)
        cursor += 4
        if cursor + length > len(data):
            raise FormatError(f"{path}: truncated id entry")
        try:
            ids.append(data[cursor : cursor + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: id is not valid UTF-8") from exc
        cursor += length
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: ids are not unique")

    return EmbeddingMatrix(ids=tuple(ids), rows=normalize_rows(raw))


def subset(matrix: EmbeddingMatrix, indices: Sequence[int]) -> EmbeddingMatrix:
    """Gather rows and ids in the given order (duplicates allowed)."""
    gathered_ids = []
    for idx in indices:
        idx = int(idx)
        if idx < 0 or idx >= matrix.n:
            raise IndexError(f"row index {idx} out of range for n={matrix.n}")
        gathered_ids.append(matrix.ids[idx])
    rows = matrix.rows[np.asarray(list(indices), dtype=np.intp)].copy() if len(
        gathered_ids
    ) else np.empty((0, matrix.d), dtype=np.float32)
    return EmbeddingMatrix(ids=tuple(gathered_ids), rows=rows)
