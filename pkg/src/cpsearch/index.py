"""Exact cosine top-k retrieval over an EmbeddingMatrix.

The scan runs in two phases: a float32 matrix-vector product over the whole
corpus, then an exact float64 rescoring of every document whose float32
score lies within a rigorous error band of the provisional k-th score. The
band bounds the float32 accumulation error, so results are identical to a
naive float64 full scan (same scores, same ordering, same tie rule) while
the hot loop stays in float32.

Ties are broken by ascending doc id.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .embedder import EmbeddingMatrix
from .errors import DataError


@dataclass(frozen=True)
class Hit:
    doc_id: str
    score: float
    rank: int


class SearchIndex:
    """Read-only search structure over unit-norm document vectors."""

    def __init__(self, matrix: EmbeddingMatrix):
        if len(matrix) == 0:
            raise DataError("cannot build an index over zero rows")
        self.matrix = matrix
        self.dim = matrix.dim
        # float32 accumulation error bound for a dot product of unit vectors
        self._band = np.float32(2.0 * matrix.dim * 2.0**-24 + 1e-6)

    def __len__(self) -> int:
        return len(self.matrix)


def build(matrix: EmbeddingMatrix) -> SearchIndex:
    return SearchIndex(matrix)


def _query_exact(
    index: SearchIndex, query: np.ndarray, k: int, exclude: frozenset[str]
) -> list[Hit]:
    mat = index.matrix
    n = len(mat)
    q64 = np.asarray(query, dtype=np.float64)
    if q64.shape != (index.dim,):
        raise ValueError(f"query shape {q64.shape} != ({index.dim},)")

    excluded_rows = [mat.row(doc_id) for doc_id in exclude if doc_id in mat]
    k_eff = min(k, n - len(excluded_rows))
    if k_eff <= 0:
        return []

    scores32 = mat.vectors @ q64.astype(np.float32)
    if excluded_rows:
        scores32[excluded_rows] = -np.inf

    band = index._band * max(1.0, float(np.linalg.norm(q64)))
    kth = np.partition(scores32, n - k_eff)[n - k_eff]
    cand = np.flatnonzero(scores32 >= kth - 2 * band)

    exact = mat.vectors[cand].astype(np.float64) @ q64
    cand_ids = np.array([mat.ids[i] for i in cand])
    order = np.lexsort((cand_ids, -exact))[:k_eff]
    return [
        Hit(doc_id=str(cand_ids[j]), score=float(exact[j]), rank=r)
        for r, j in enumerate(order, start=1)
    ]


def top_k(
    index: SearchIndex,
    query: np.ndarray,
    k: int,
    exclude: set[str] | frozenset[str] | None = None,
) -> list[Hit]:
    """Exact top-k by cosine; excluded ids are never returned.

    Returns exactly min(k, corpus - |exclude|) hits, ranked 1..k with
    non-increasing scores and id-ascending tie-breaking.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return _query_exact(index, query, k, frozenset(exclude or ()))


def max_similarity(
    index: SearchIndex,
    query: np.ndarray,
    exclude: set[str] | frozenset[str] | None = None,
) -> tuple[str, float]:
    """The best-scoring non-excluded document and its cosine."""
    hits = top_k(index, query, 1, exclude)
    if not hits:
        raise DataError("no documents left after exclusion")
    return hits[0].doc_id, hits[0].score


def batch_top_k(
    index: SearchIndex,
    queries: np.ndarray,
    k: int,
    exclude: list[set[str] | frozenset[str] | None] | None = None,
    threads: int = 1,
) -> list[list[Hit]]:
    """top_k for each query row; results are independent of thread count."""
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ValueError("queries must be an (n, dim) array")
    nq = queries.shape[0]
    if exclude is None:
        exclude = [None] * nq
    if len(exclude) != nq:
        raise ValueError("one exclude set per query required")

    def one(i: int) -> list[Hit]:
        return top_k(index, queries[i], k, exclude[i])

    if threads <= 1 or nq <= 1:
        return [one(i) for i in range(nq)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(nq)))
