"""Ranking metrics over graded relevance judgments.

NDCG@k is the primary metric; Recall@k and MRR@k are auxiliary
diagnostics. DCG uses the linear gain rel / log2(rank + 1); relevance is
binary in all four tasks here, where the linear and exponential gain
variants coincide.

File formats: qrels are TREC 4-column text (``qid 0 docid rel``), runs are
``qid docid rank score``, both space-separated with LF line endings.
"""

from __future__ import annotations

from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .index import Hit

# A run maps each query id to its ranked hit list.
RunResult = Mapping[str, Sequence[Hit]]


class Qrels:
    """Per-query relevance judgments; every query has >= 1 relevant doc."""

    def __init__(self, data: Mapping[str, Mapping[str, int]]):
        cleaned: dict[str, dict[str, int]] = {}
        for qid, docs in data.items():
            if not any(rel > 0 for rel in docs.values()):
                raise DataError(f"query {qid!r} has no relevant documents")
            for doc_id, rel in docs.items():
                if rel < 0:
                    raise DataError(
                        f"negative relevance {rel} for query {qid!r} doc {doc_id!r}"
                    )
            cleaned[qid] = dict(docs)
        if not cleaned:
            raise DataError("qrels are empty")
        self.data = cleaned

    def __len__(self) -> int:
        return len(self.data)

    def __iter__(self):
        return iter(self.data)

    def relevant(self, qid: str) -> dict[str, int]:
        return self.data[qid]

    def check_docs_resolve(self, corpus_ids: Iterable[str]) -> None:
        known = set(corpus_ids)
        for qid, docs in self.data.items():
            for doc_id in docs:
                if doc_id not in known:
                    raise DataError(
                        f"qrels doc {doc_id!r} (query {qid!r}) not in corpus"
                    )


def write_qrels(qrels: Qrels, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels:
            for doc_id, rel in qrels.relevant(qid).items():
                fh.write(f"{qid} 0 {doc_id} {rel}\n")


def read_qrels(path: str) -> Qrels:
    data: dict[str, dict[str, int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{line_no}: expected 4 columns")
            qid, _, doc_id, rel = parts
            data.setdefault(qid, {})[doc_id] = int(rel)
    return Qrels(data)


def write_run(run: RunResult, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid, hits in run.items():
            for hit in hits:
                fh.write(f"{qid} {hit.doc_id} {hit.rank} {hit.score!r}\n")


def read_run(path: str) -> dict[str, list[Hit]]:
    run: dict[str, list[Hit]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{line_no}: expected 4 columns")
            qid, doc_id, rank, score = parts
            run.setdefault(qid, []).append(
                Hit(doc_id=doc_id, score=float(score), rank=int(rank))
            )
    return run


def _dcg(rels: Sequence[int]) -> float:
    if not rels:
        return 0.0
    gains = np.asarray(rels, dtype=np.float64)
    ranks = np.arange(1, len(gains) + 1, dtype=np.float64)
    return float(np.sum(gains / np.log2(ranks + 1.0)))


def ndcg_at_k(run: RunResult, qrels: Qrels, k: int) -> float:
    """Mean NDCG@k over the qrels queries.

    A query missing from the run contributes an empty ranking (NDCG 0).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not run:
        raise DataError("run is empty")
    scores = []
    for qid in qrels:
        rel_of = qrels.relevant(qid)
        hits = run.get(qid, [])[:k]
        dcg = _dcg([rel_of.get(h.doc_id, 0) for h in hits])
        ideal = sorted(rel_of.values(), reverse=True)[:k]
        idcg = _dcg(ideal)
        scores.append(dcg / idcg)
    return float(np.mean(scores))


def recall_at_k(run: RunResult, qrels: Qrels, k: int) -> float:
    """Mean fraction of each query's relevant docs found in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not run:
        raise DataError("run is empty")
    scores = []
    for qid in qrels:
        relevant = {d for d, rel in qrels.relevant(qid).items() if rel > 0}
        found = {h.doc_id for h in run.get(qid, [])[:k]} & relevant
        scores.append(len(found) / len(relevant))
    return float(np.mean(scores))


def mrr(run: RunResult, qrels: Qrels, k: int) -> float:
    """Mean reciprocal rank of the first relevant doc within the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not run:
        raise DataError("run is empty")
    scores = []
    for qid in qrels:
        relevant = {d for d, rel in qrels.relevant(qid).items() if rel > 0}
        rr = 0.0
        for pos, hit in enumerate(run.get(qid, [])[:k], start=1):
            if hit.doc_id in relevant:
                rr = 1.0 / pos
                break
        scores.append(rr)
    return float(np.mean(scores))


def task_average(scores: Sequence[float]) -> float:
    """Arithmetic mean of exactly four per-task scores, to 2 decimals.

    Uses decimal arithmetic with half-up rounding so that 2-decimal inputs
    reproduce published averages exactly (e.g. mean 69.495 -> 69.50).
    """
    if len(scores) != 4:
        raise ValueError(f"expected exactly 4 scores, got {len(scores)}")
    total = sum(Decimal(str(float(s))) for s in scores)
    mean = (total / 4).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return float(mean)
