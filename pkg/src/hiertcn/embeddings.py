"""Read-only item embedding table backed by a memory-mapped file.

Layout (all little-endian)::

    magic   8 bytes  b"HTCNEMB1"
    version u32      1
    N       u64      item count
    d       u32      embedding dimension
    data    N*d f32  row-major embeddings
    ids     N u64    universal item ID of each row

IDs are held as signed 64-bit integers in memory; values must stay below
2**63.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HTCNEMB1"
VERSION = 1
_HEADER = struct.Struct("<8sIQI")


class MissingItemError(KeyError):
    """Lookup of an item ID that is not in the table."""


class DuplicateItemError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


def write_embedding_table(path, ids, vectors) -> Path:
    """Write ``vectors`` [N, d] keyed by ``ids`` [N] to ``path``."""
    ids = np.asarray(ids, dtype=np.int64)
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != ids.shape[0]:
        raise EmbeddingFormatError("vectors must be [N, d] with one row per id")
    if np.unique(ids).size != ids.size:
        raise DuplicateItemError("duplicate item IDs in embedding table")
    if np.any(ids < 0):
        raise EmbeddingFormatError("item IDs must be non-negative")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, ids.size, vectors.shape[1]))
        fh.write(np.ascontiguousarray(vectors).tobytes())
        fh.write(ids.astype("<u8").tobytes())
    os.replace(tmp, path)
    return path


class EmbeddingTable:
    """Universal item ID -> d float32 values, immutable once opened.

    Lookups are vectorised through a sorted ID index and never mutate the
    table, so any number of threads can read concurrently.
    """

    def __init__(self, ids, vectors, path: Path | None = None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.vectors = vectors
        self.path = path
        order = np.argsort(self.ids, kind="stable")
        self._sorted_ids = self.ids[order]
        self._rows = order
        if self._sorted_ids.size and np.any(np.diff(self._sorted_ids) == 0):
            raise DuplicateItemError("duplicate item IDs in embedding table")

    @classmethod
    def open(cls, path) -> "EmbeddingTable":
        path = Path(path)
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise EmbeddingFormatError(f"{path}: truncated header")
        magic, version, n, d = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise EmbeddingFormatError(f"{path}: unsupported version {version}")
        expected = _HEADER.size + n * d * 4 + n * 8
        if path.stat().st_size != expected:
            raise EmbeddingFormatError(f"{path}: size {path.stat().st_size}, expected {expected}")
        vectors = np.memmap(path, dtype="<f4", mode="r", offset=_HEADER.size, shape=(n, d)) if n else np.zeros((0, d), "<f4")
        ids = np.fromfile(path, dtype="<u8", count=n, offset=_HEADER.size + n * d * 4).astype(np.int64)
        return cls(ids, vectors, path)

    @classmethod
    def from_arrays(cls, ids, vectors) -> "EmbeddingTable":
        return cls(ids, np.ascontiguousarray(vectors, dtype=np.float32))

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def rows(self, ids) -> np.ndarray:
        """Row indices for ``ids``; raises :class:`MissingItemError` for unknown IDs."""
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self._sorted_ids, ids.ravel())
        pos_c = np.minimum(pos, max(self._sorted_ids.size - 1, 0))
        ok = (pos < self._sorted_ids.size) & (self._sorted_ids[pos_c] == ids.ravel()) if self._sorted_ids.size else np.zeros(ids.size, bool)
        if not np.all(ok):
            missing = ids.ravel()[~ok][:5].tolist()
            raise MissingItemError(f"unknown item id(s) {missing}")
        return self._rows[pos_c].reshape(ids.shape)

    def contains(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if not self._sorted_ids.size:
            return np.zeros(ids.size, bool)
        pos = np.minimum(np.searchsorted(self._sorted_ids, ids), self._sorted_ids.size - 1)
        return self._sorted_ids[pos] == ids

    def lookup(self, ids, dtype=np.float32) -> np.ndarray:
        """Embeddings for ``ids`` with shape ``ids.shape + (d,)``."""
        r = self.rows(ids)
        return np.asarray(self.vectors[r.ravel()], dtype=dtype).reshape(*r.shape, self.dim)

    def matrix(self, dtype=np.float32) -> np.ndarray:
        """All embeddings in row order (loads the mapped block)."""
        return np.asarray(self.vectors, dtype=dtype)

    def save(self, path) -> Path:
        return write_embedding_table(path, self.ids, np.asarray(self.vectors))


def build_embedding_table(path, ids, vectors) -> EmbeddingTable:
    """Write a table and reopen it memory-mapped."""
    write_embedding_table(path, ids, vectors)
    return EmbeddingTable.open(path)
