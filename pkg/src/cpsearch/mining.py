"""Hard-negative construction for second-stage triplet fine-tuning.

For each annotated (anchor, positive) pair: retrieve the anchor's top-k
most similar pool documents (excluding the anchor and all of its known
positives), sample candidates in a seeded random order, and accept the
first one that passes the non-equivalence verifier. Every attempted
candidate produces a record with its verdict; anchors whose candidates are
all rejected are skipped with a log message.

Verifiers are pluggable. The default heuristic rejects a candidate when
its cosine reaches a threshold or when the (anchor, candidate) pair is a
known duplicate. The external adapter speaks a line-delimited protocol
(one JSON request per line, one verdict word per line back) so a
model-backed checker can be attached without code changes.
"""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import dataclass
from typing import IO, Iterable, Protocol

import numpy as np

from .corpus import DuplicatePair
from .embedder import EmbeddingMatrix, _seed_from
from .errors import DataError
from .index import SearchIndex, top_k

logger = logging.getLogger(__name__)

VERIFIER_KINDS = ("heuristic", "external")


@dataclass
class VerifierConfig:
    """Declarative verifier selection, mirroring the CLI flags."""

    kind: str = "heuristic"
    threshold: float = 0.95
    endpoint: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in VERIFIER_KINDS:
            raise ValueError(f"kind {self.kind!r} not in {VERIFIER_KINDS}")
        if self.kind == "heuristic" and not 0.0 < self.threshold <= 1.0:
            raise ValueError("heuristic threshold must be in (0, 1]")


@dataclass(frozen=True)
class MinedTriplet:
    """One candidate negative for an (anchor, positive) pair."""

    anchor: str
    positive: str
    negative: str
    negative_score: float
    verdict: str  # "accepted" | "rejected"


class Verifier(Protocol):
    def verify(self, anchor_id: str, candidate_id: str, score: float) -> str: ...


def _norm_pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def heuristic_verify(
    cosine: float,
    threshold: float,
    is_known_duplicate: bool = False,
) -> str:
    """Reject when the cosine reaches the threshold or the pair is a duplicate."""
    if is_known_duplicate or cosine >= threshold:
        return "rejected"
    return "accepted"


class HeuristicVerifier:
    """Threshold + duplicate-set non-equivalence check over embeddings."""

    def __init__(
        self,
        embeddings: EmbeddingMatrix,
        threshold: float = 0.95,
        duplicate_pairs: Iterable[DuplicatePair] = (),
    ):
        self.embeddings = embeddings
        self.threshold = threshold
        self.duplicates = {
            _norm_pair(p.problem_a, p.problem_b) for p in duplicate_pairs
        }

    def verify(self, anchor_id: str, candidate_id: str, score: float) -> str:
        return heuristic_verify(
            cosine=score,
            threshold=self.threshold,
            is_known_duplicate=_norm_pair(anchor_id, candidate_id) in self.duplicates,
        )


class ExternalVerifier:
    """Adapter for an external equivalence checker.

    Protocol: one request per line, ``{"anchor": ..., "candidate": ...}``
    as JSON; the peer answers one line per request, either ``equivalent``
    or ``not_equivalent``. Texts are resolved through the provided id ->
    text mapping. The peer is either a spawned command (endpoint string)
    or an explicit (request, response) stream pair, which keeps tests and
    offline use simple.
    """

    def __init__(
        self,
        texts: dict[str, str],
        endpoint: str | None = None,
        request_stream: IO[str] | None = None,
        response_stream: IO[str] | None = None,
    ):
        self.texts = texts
        self._proc = None
        if endpoint is not None:
            self._proc = subprocess.Popen(
                endpoint,
                shell=True,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
            )
            self._request = self._proc.stdin
            self._response = self._proc.stdout
        else:
            if request_stream is None or response_stream is None:
                raise ValueError("need an endpoint or a stream pair")
            self._request = request_stream
            self._response = response_stream

    def verify(self, anchor_id: str, candidate_id: str, score: float) -> str:
        req = {"anchor": self.texts[anchor_id], "candidate": self.texts[candidate_id]}
        self._request.write(json.dumps(req, ensure_ascii=False) + "\n")
        self._request.flush()
        answer = self._response.readline().strip()
        if answer not in ("equivalent", "not_equivalent"):
            raise DataError(f"external verifier answered {answer!r}")
        return "rejected" if answer == "equivalent" else "accepted"

    def close(self) -> None:
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait()


def mine_negatives(
    index: SearchIndex,
    pairs: list[tuple[str, str]],
    anchors: EmbeddingMatrix,
    verifier: Verifier,
    k: int = 10,
    seed: int = 0,
) -> list[MinedTriplet]:
    """Mine one verified hard negative per (anchor, positive) pair.

    Retrieval excludes the anchor itself and every positive known for that
    anchor across all pairs. Candidate order is drawn from a per-anchor
    RNG (global seed mixed with the anchor id), so mining is deterministic
    regardless of pair order or parallelism across anchors. Returns one
    record per attempted candidate, rejected attempts included; an
    accepted record ends the search for its pair.
    """
    if len(index) == 0:
        raise DataError("empty candidate pool")
    known_pos: dict[str, set[str]] = {}
    for anchor_id, positive_id in pairs:
        known_pos.setdefault(anchor_id, set()).add(positive_id)

    by_anchor: dict[str, list[str]] = {}
    for anchor_id, positive_id in pairs:
        by_anchor.setdefault(anchor_id, []).append(positive_id)

    records: list[MinedTriplet] = []
    for anchor_id in sorted(by_anchor):
        if anchor_id not in anchors:
            raise DataError(f"no embedding for anchor {anchor_id!r}")
        rng = np.random.default_rng(_seed_from(seed, "mine", anchor_id))
        query = anchors.vector(anchor_id).astype(np.float64)
        exclude = {anchor_id} | known_pos[anchor_id]
        hits = top_k(index, query, k, exclude=exclude)
        for positive_id in sorted(by_anchor[anchor_id]):
            accepted = False
            order = rng.permutation(len(hits)) if hits else []
            for j in order:
                hit = hits[int(j)]
                verdict = verifier.verify(anchor_id, hit.doc_id, hit.score)
                records.append(
                    MinedTriplet(
                        anchor=anchor_id,
                        positive=positive_id,
                        negative=hit.doc_id,
                        negative_score=hit.score,
                        verdict=verdict,
                    )
                )
                if verdict == "accepted":
                    accepted = True
                    break
            if not accepted:
                logger.warning(
                    "anchor %s: no candidate accepted for positive %s; skipped",
                    anchor_id,
                    positive_id,
                )
    return records


def accepted_triplets(records: Iterable[MinedTriplet]) -> list[MinedTriplet]:
    return [r for r in records if r.verdict == "accepted"]


def write_triplets(records: Iterable[MinedTriplet], path: str) -> None:
    """Emit mined records as JSONL, verdicts included."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "anchor": r.anchor,
                        "positive": r.positive,
                        "negative": r.negative,
                        "negative_score": r.negative_score,
                        "verdict": r.verdict,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_triplets(path: str) -> list[MinedTriplet]:
    out: list[MinedTriplet] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                MinedTriplet(
                    anchor=rec["anchor"],
                    positive=rec["positive"],
                    negative=rec["negative"],
                    negative_score=float(rec["negative_score"]),
                    verdict=rec["verdict"],
                )
            )
    return out
