"""Embedding vectors, cosine scoring and the EMB1 on-disk store.

File layout (little-endian)::

    b"EMB1" | u32 count | u32 dim | count*dim float32, row-major

Ids live in a sidecar ``<path>.ids`` with one UTF-8 id per line, in row order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
SOURCE_TAGS = ("encoder", "raw-pixel", "external")


class EmbeddingError(ValueError):
    """Invalid embedding content or shape."""


class StoreFormatError(EmbeddingError):
    """Base class for problems reading an EMB1 file."""


class BadMagicError(StoreFormatError):
    pass


class TruncatedPayloadError(StoreFormatError):
    pass


class IdCountMismatchError(StoreFormatError):
    pass


def validate_id(identifier: str) -> str:
    if not isinstance(identifier, str) or not identifier:
        raise EmbeddingError(f"id must be a non-empty string, got {identifier!r}")
    if any(c in identifier for c in ",\n\r"):
        raise EmbeddingError(f"id {identifier!r} contains a comma or newline")
    return identifier


@dataclass(frozen=True)
class EmbeddingVector:
    """One image's embedding. Rejects non-finite entries and zero vectors."""

    id: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        validate_id(self.id)
        v = np.asarray(self.values)
        if v.ndim != 1 or v.size == 0:
            raise EmbeddingError(f"{self.id}: embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(v)):
            raise EmbeddingError(f"{self.id}: embedding has non-finite entries")
        if not np.any(v):
            raise EmbeddingError(f"{self.id}: zero-norm embedding")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity in double precision."""
    if a.dim != b.dim:
        raise EmbeddingError(f"dimension mismatch: {a.dim} vs {b.dim}")
    x = a.values.astype(np.float64)
    y = b.values.astype(np.float64)
    s = float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return min(1.0, max(-1.0, s))


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity between the rows of ``a`` and ``b`` (float64)."""
    if a.shape[1] != b.shape[1]:
        raise EmbeddingError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.clip(normalize_rows(a) @ normalize_rows(b).T, -1.0, 1.0)


class EmbeddingStore:
    """An ordered, immutable collection of same-dimension embeddings.

    Parameters
    ----------
    dim : int
        Declared embedding dimension.
    vectors : iterable of EmbeddingVector
        Entries in insertion order. Ids must be unique.
    source : str
        One of ``"encoder"``, ``"raw-pixel"`` or ``"external"``.
    """

    def __init__(self, dim: int, vectors: Iterable[EmbeddingVector] = (), source: str = "external"):
        if int(dim) < 1:
            raise EmbeddingError("dim must be positive")
        if source not in SOURCE_TAGS:
            raise EmbeddingError(f"unknown source tag {source!r}")
        self.dim = int(dim)
        self.source = source
        entries = list(vectors)
        seen = set()
        for e in entries:
            if e.dim != self.dim:
                raise EmbeddingError(f"{e.id}: dimension {e.dim} != store dimension {self.dim}")
            if e.id in seen:
                raise EmbeddingError(f"duplicate id {e.id!r}")
            seen.add(e.id)
        self._entries = tuple(entries)
        self._matrix = None

    @classmethod
    def from_arrays(cls, ids: Sequence[str], values, source: str = "external") -> "EmbeddingStore":
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[0] != len(ids):
            raise EmbeddingError("values must be a (len(ids), dim) matrix")
        return cls(values.shape[1], (EmbeddingVector(i, v) for i, v in zip(ids, values)), source)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[EmbeddingVector]:
        return iter(self._entries)

    def __getitem__(self, index: int) -> EmbeddingVector:
        return self._entries[index]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self._entries]

    @property
    def matrix(self) -> np.ndarray:
        """Stored values as a read-only ``(n, dim)`` array in entry order."""
        if self._matrix is None:
            if self._entries:
                m = np.stack([e.values for e in self._entries])
            else:
                m = np.zeros((0, self.dim), dtype=np.float32)
            m.flags.writeable = False
            self._matrix = m
        return self._matrix

    def sorted_by_id(self) -> "EmbeddingStore":
        """Canonical copy ordered by ascending id."""
        return EmbeddingStore(self.dim, sorted(self._entries, key=lambda e: e.id), self.source)


def write_store(store: EmbeddingStore, path) -> None:
    path = Path(path)
    values = np.ascontiguousarray(store.matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, len(store), store.dim))
        fh.write(values.tobytes())
    with open(_ids_path(path), "w", encoding="utf-8", newline="\n") as fh:
        for identifier in store.ids:
            fh.write(identifier + "\n")


def read_store(path, source: str = "external") -> EmbeddingStore:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * count * dim
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
    ids = _ids_path(path).read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise IdCountMismatchError(f"{path}: {count} vectors but {len(ids)} ids")
    return EmbeddingStore.from_arrays(ids, values.astype(np.float32), source=source)


def _ids_path(path: Path) -> Path:
    return path.with_name(path.name + ".ids")
