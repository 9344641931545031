"""Immutable, L2-normalized embedding tables with exact top-k / bottom-k search.

Tables are built once and never mutated, so queries are pure and safe under
unlimited concurrent readers.  Similarity is the dot product of unit rows
(cosine).  Search is exact brute force: at the store sizes this library
targets (tens of thousands of rows) a full scan is fast and correctness is
the contract.

Vectors are held in float64 in memory; the on-disk container is float32
(see :mod:`retaug.tableio`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tableio
from .errors import (
    DimensionMismatch,
    DuplicateName,
    KTooLarge,
    NonFiniteValue,
    UnknownName,
    ZeroNormQuery,
    ZeroNormRow,
)

_ZERO_NORM = 1e-12
# rows further than this from unit norm in a loaded file get a warning
_FILE_NORM_TOL = 1e-4


@dataclass(frozen=True)
class EmbeddingTable:
    """Named unit-norm row vectors.

    Invariants: names are unique after case-folding, every row has L2 norm
    within 1e-6 of 1.0, and ``len(names) == vectors.shape[0]``.
    """

    names: tuple[str, ...]
    vectors: np.ndarray
    dim: int
    normalized: bool = True
    _index: dict[str, int] = field(repr=False, compare=False, default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownName(f"name not in table: {name!r}") from None

    def row(self, name: str) -> np.ndarray:
        return self.vectors[self.index_of(name)]

    def __contains__(self, name: str) -> bool:
        return name in self._index


@dataclass(frozen=True)
class TopKResult:
    """k row indices with their cosine scores, in retrieval order."""

    indices: np.ndarray
    scores: np.ndarray


def build_table(names, vectors) -> EmbeddingTable:
    """Validate and normalize raw rows into an EmbeddingTable.

    Rejects ragged or non-finite input, name/row count mismatches,
    case-folded duplicate names, and rows with (near-)zero norm.
    """
    names = [str(n) for n in names]
    try:
        vectors = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatch(f"expected rectangular 2-d input: {exc}") from None
    if vectors.ndim == 1 and len(names) == 1:
        vectors = vectors.reshape(1, -1)
    if vectors.ndim != 2:
        raise DimensionMismatch(f"expected rectangular 2-d input, got shape {vectors.shape}")
    if vectors.shape[0] != len(names):
        raise DimensionMismatch(f"{len(names)} names for {vectors.shape[0]} rows")
    if vectors.shape[1] == 0:
        raise DimensionMismatch("zero-dimensional vectors")
    if not np.all(np.isfinite(vectors)):
        raise NonFiniteValue("vectors contain NaN or Inf")

    seen: dict[str, str] = {}
    for name in names:
        folded = name.casefold()
        if folded in seen:
            raise DuplicateName(f"{name!r} case-folds to the same key as {seen[folded]!r}")
        seen[folded] = name

    norms = np.linalg.norm(vectors, axis=1)
    bad = np.flatnonzero(norms < _ZERO_NORM)
    if bad.size:
        raise ZeroNormRow(f"zero-norm row(s) at indices {bad.tolist()}")
    unit = vectors / norms[:, None]
    unit.setflags(write=False)
    index = {name: i for i, name in enumerate(names)}
    return EmbeddingTable(tuple(names), unit, unit.shape[1], True, index)


def _prepare_query(table: EmbeddingTable, query, k: int) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != table.dim:
        raise DimensionMismatch(f"query dim {query.shape[0]} != table dim {table.dim}")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    if k > table.count:
        raise KTooLarge(f"k={k} exceeds table count {table.count}")
    norm = float(np.linalg.norm(query))
    if norm < _ZERO_NORM:
        raise ZeroNormQuery("query has zero norm")
    return query / norm


def topk(table: EmbeddingTable, query, k: int) -> TopKResult:
    """Exactly the k most similar rows, scores descending, ties by ascending index."""
    query = _prepare_query(table, query, k)
    scores = table.vectors @ query
    order = np.argsort(-scores, kind="stable")[:k]
    return TopKResult(order.astype(np.int64), scores[order])


def bottomk(table: EmbeddingTable, query, k: int) -> TopKResult:
    """Exactly the k least similar rows, scores ascending, ties by ascending index."""
    query = _prepare_query(table, query, k)
    scores = table.vectors @ query
    order = np.argsort(scores, kind="stable")[:k]
    return TopKResult(order.astype(np.int64), scores[order])


def subset(table: EmbeddingTable, indices) -> EmbeddingTable:
    """Table restricted to the given row indices, in the given order."""
    indices = np.asarray(indices, dtype=np.int64)
    names = [table.names[i] for i in indices]
    vectors = table.vectors[indices]
    vectors.setflags(write=False)
    index = {name: i for i, name in enumerate(names)}
    return EmbeddingTable(tuple(names), vectors, table.dim, True, index)


def union_tables(first: EmbeddingTable, second: EmbeddingTable) -> EmbeddingTable:
    """Concatenate two tables, dropping rows of `second` whose names
    case-fold onto names already present in `first`."""
    if first.dim != second.dim:
        raise DimensionMismatch(f"dim {first.dim} != dim {second.dim}")
    folded = {n.casefold() for n in first.names}
    keep = [i for i, n in enumerate(second.names) if n.casefold() not in folded]
    names = list(first.names) + [second.names[i] for i in keep]
    vectors = np.vstack([first.vectors, second.vectors[keep]])
    vectors.setflags(write=False)
    index = {name: i for i, name in enumerate(names)}
    return EmbeddingTable(tuple(names), vectors, first.dim, True, index)


def save_table(path: str | Path, table: EmbeddingTable) -> None:
    """Write a table in the binary container format (f32 payload)."""
    tableio.write_matrix(path, list(table.names), table.vectors)


def load_table(path: str | Path, warnings: list[str] | None = None) -> EmbeddingTable:
    """Load and validate a table written by :func:`save_table`.

    Rows are renormalized after the f32 round trip.  If a stored row
    deviates from unit norm by more than 1e-4, a warning string is appended
    to `warnings` (when given); structural problems still raise.
    """
    names, values = tableio.read_matrix(path)
    if warnings is not None:
        norms = np.linalg.norm(values, axis=1)
        off = np.flatnonzero(np.abs(norms - 1.0) > _FILE_NORM_TOL)
        for i in off:
            warnings.append(
                f"{path}: row {i} ({names[i]!r}) has norm {norms[i]:.6f}, expected 1.0"
            )
    return build_table(names, values)
