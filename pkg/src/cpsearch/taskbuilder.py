"""Construction of the four retrieval tasks from corpus data.

* text-to-code / code-to-code: temporal split at a cutoff date, test items
  strictly from the cutoff onward;
* problem-to-duplicate: connected components of the annotated pair graph,
  a seeded 30% cluster draw for the test set, one query per cluster and
  source-matched distractors;
* simplified-to-full: a seeded draw of test pairs with 1:1 qrels.

Each builder returns a BuiltTask (queries, corpus, qrels, training
remainder) that can be written out as queries.jsonl / corpus.jsonl /
qrels.txt plus a provenance manifest.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import date

import numpy as np

from .corpus import Corpus, DuplicatePair, Problem, SimplifiedPair, Solution
from .errors import DataError
from .metrics import Qrels, write_qrels

logger = logging.getLogger(__name__)

TASK_KINDS = ("t2c", "c2c", "p2dup", "s2full")


@dataclass
class TaskSpec:
    """Parameters steering task construction."""

    kind: str
    cutoff_date: date | None = None
    cluster_test_fraction: float = 0.30
    test_pair_count: int = 10_000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind {self.kind!r} not in {TASK_KINDS}")
        if not 0.0 < self.cluster_test_fraction < 1.0:
            raise ValueError("cluster_test_fraction must be in (0, 1)")


@dataclass
class DupCluster:
    """A maximal set of mutually duplicate problems with edge annotations."""

    members: frozenset[str]
    pairs: tuple[DuplicatePair, ...]

    def __post_init__(self) -> None:
        if len(self.members) < 2:
            raise DataError("a duplicate cluster needs at least 2 members")


@dataclass
class BuiltTask:
    """One retrieval task plus its complementary training material."""

    kind: str
    queries: dict[str, str]
    corpus: dict[str, str]
    qrels: Qrels
    train_remainder: list
    meta: dict = field(default_factory=dict)


@dataclass
class Split:
    problems: list[Problem]
    solutions: list[Solution]


def temporal_split(
    corpus: Corpus, solutions: list[Solution], cutoff: date
) -> tuple[Split, Split]:
    """Split problems and their solutions at a cutoff date.

    Test = problems timestamped on or after the cutoff, plus their
    solutions; train is the strict complement. Problems without a
    timestamp are excluded with a warning.
    """
    train = Split([], [])
    test = Split([], [])
    side: dict[str, Split] = {}
    for problem in corpus:
        if problem.timestamp is None:
            logger.warning("problem %s has no timestamp; excluded from split", problem.id)
            continue
        dest = test if problem.timestamp >= cutoff else train
        dest.problems.append(problem)
        side[problem.id] = dest
    for sol in solutions:
        dest = side.get(sol.problem_id)
        if dest is None:
            logger.warning("solution %s references excluded problem %s", sol.id, sol.problem_id)
            continue
        dest.solutions.append(sol)
    if not test.problems:
        logger.warning("temporal split at %s produced an empty test set", cutoff)
    return train, test


def build_t2c(test: Split) -> BuiltTask:
    """Statement queries against the corpus of all test solutions."""
    by_problem: dict[str, list[Solution]] = {}
    for sol in test.solutions:
        by_problem.setdefault(sol.problem_id, []).append(sol)
    queries: dict[str, str] = {}
    qrels_data: dict[str, dict[str, int]] = {}
    for problem in test.problems:
        sols = by_problem.get(problem.id)
        if not sols:
            continue
        queries[problem.id] = problem.statement
        qrels_data[problem.id] = {s.id: 1 for s in sols}
    if not queries:
        raise DataError("no test problem has an accepted solution")
    corpus = {s.id: s.code for s in test.solutions}
    return BuiltTask(
        kind="t2c",
        queries=queries,
        corpus=corpus,
        qrels=Qrels(qrels_data),
        train_remainder=[],
        meta={"n_test_problems": len(test.problems)},
    )


def build_c2c(test: Split, seed: int = 0) -> BuiltTask:
    """One seeded query solution per multi-solution problem vs the rest."""
    by_problem: dict[str, list[Solution]] = {}
    for sol in test.solutions:
        by_problem.setdefault(sol.problem_id, []).append(sol)
    rng = np.random.default_rng(seed)
    queries: dict[str, str] = {}
    qrels_data: dict[str, dict[str, int]] = {}
    query_sol_ids: set[str] = set()
    for pid in sorted(by_problem):
        sols = sorted(by_problem[pid], key=lambda s: s.id)
        if len(sols) < 2:
            continue
        query_sol = sols[int(rng.integers(len(sols)))]
        query_sol_ids.add(query_sol.id)
        queries[query_sol.id] = query_sol.code
        qrels_data[query_sol.id] = {s.id: 1 for s in sols if s.id != query_sol.id}
    if not queries:
        raise DataError("no test problem has >= 2 accepted solutions")
    corpus = {s.id: s.code for s in test.solutions if s.id not in query_sol_ids}
    return BuiltTask(
        kind="c2c",
        queries=queries,
        corpus=corpus,
        qrels=Qrels(qrels_data),
        train_remainder=[],
        meta={"seed": seed},
    )


class _UnionFind:
    def __init__(self) -> None:
        self.parent: dict[str, str] = {}
        self.size: dict[str, int] = {}

    def find(self, x: str) -> str:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def add(self, x: str) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]


def cluster_duplicates(pairs: list[DuplicatePair]) -> list[DupCluster]:
    """Connected components of the duplicate-pair graph via union-find."""
    uf = _UnionFind()
    for pair in pairs:
        uf.add(pair.problem_a)
        uf.add(pair.problem_b)
        uf.union(pair.problem_a, pair.problem_b)
    members: dict[str, set[str]] = {}
    for node in uf.parent:
        members.setdefault(uf.find(node), set()).add(node)
    edges: dict[str, list[DuplicatePair]] = {}
    for pair in pairs:
        edges.setdefault(uf.find(pair.problem_a), []).append(pair)
    clusters = [
        DupCluster(members=frozenset(nodes), pairs=tuple(edges.get(root, ())))
        for root, nodes in members.items()
    ]
    clusters.sort(key=lambda c: min(c.members))
    return clusters


def build_p2dup(
    clusters: list[DupCluster],
    problems: Corpus,
    fraction: float = 0.30,
    seed: int = 0,
    restrict_source: str | None = None,
) -> BuiltTask:
    """Seeded cluster draw; one query per test cluster, rest as relevants.

    Distractors are all problems sharing a source platform with any
    test-cluster member (or only `restrict_source` when given) that are
    not themselves in a test cluster. Pairs from untouched clusters form
    the training remainder.
    """
    if not clusters:
        raise DataError("no duplicate clusters")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    ordered = sorted(clusters, key=lambda c: min(c.members))
    n_test = math.ceil(fraction * len(ordered))
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(ordered), size=n_test, replace=False).tolist())
    chosen_set = set(chosen)

    queries: dict[str, str] = {}
    corpus: dict[str, str] = {}
    qrels_data: dict[str, dict[str, int]] = {}
    test_members: set[str] = set()

    def statement_of(pid: str) -> str:
        problem = problems.get(pid)
        if problem is None:
            raise DataError(f"cluster member {pid!r} not found in corpus")
        return problem.statement

    for idx in chosen:
        cluster = ordered[idx]
        members = sorted(cluster.members)
        query_id = members[int(rng.integers(len(members)))]
        rest = [m for m in members if m != query_id]
        queries[query_id] = statement_of(query_id)
        for m in rest:
            corpus[m] = statement_of(m)
        qrels_data[query_id] = {m: 1 for m in rest}
        test_members.update(members)

    if restrict_source is not None:
        sources = {restrict_source}
    else:
        sources = {problems[m].source for m in test_members if m in problems}
    for problem in problems:
        if problem.source in sources and problem.id not in test_members:
            corpus[problem.id] = problem.statement

    remainder = [
        pair
        for i, cluster in enumerate(ordered)
        if i not in chosen_set
        for pair in cluster.pairs
    ]
    return BuiltTask(
        kind="p2dup",
        queries=queries,
        corpus=corpus,
        qrels=Qrels(qrels_data),
        train_remainder=remainder,
        meta={"seed": seed, "fraction": fraction, "n_clusters": len(ordered),
              "n_test_clusters": n_test},
    )


def build_s2full(
    pairs: list[SimplifiedPair],
    problems: Corpus,
    test_count: int = 10_000,
    seed: int = 0,
) -> BuiltTask:
    """Seeded draw of test pairs; simplified text queries full text, 1:1."""
    if len(pairs) < test_count:
        raise DataError(
            f"insufficient pairs: have {len(pairs)}, need {test_count}"
        )
    ordered = sorted(pairs, key=lambda p: (p.simplified_id, p.full_id))
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(ordered), size=test_count, replace=False).tolist())
    chosen_set = set(chosen)

    queries: dict[str, str] = {}
    corpus: dict[str, str] = {}
    qrels_data: dict[str, dict[str, int]] = {}
    for idx in chosen:
        pair = ordered[idx]
        simp = problems.get(pair.simplified_id)
        full = problems.get(pair.full_id)
        if simp is None or full is None:
            raise DataError(f"pair {pair} references an unknown problem")
        queries[simp.id] = simp.statement
        corpus[full.id] = full.statement
        qrels_data[simp.id] = {full.id: 1}
    remainder = [p for i, p in enumerate(ordered) if i not in chosen_set]
    return BuiltTask(
        kind="s2full",
        queries=queries,
        corpus=corpus,
        qrels=Qrels(qrels_data),
        train_remainder=remainder,
        meta={"seed": seed, "test_count": test_count},
    )


def write_task(task: BuiltTask, outdir: str, manifest_extra: dict | None = None) -> None:
    """Emit queries.jsonl, corpus.jsonl, qrels.txt and a provenance manifest."""
    os.makedirs(outdir, exist_ok=True)
    for doc_id in list(task.queries) + list(task.corpus):
        if any(ch.isspace() for ch in doc_id):
            raise DataError(f"id {doc_id!r} contains whitespace; TREC emission needs plain ids")
    with open(os.path.join(outdir, "queries.jsonl"), "w", encoding="utf-8") as fh:
        for qid, text in task.queries.items():
            fh.write(json.dumps({"id": qid, "text": text}, ensure_ascii=False) + "\n")
    with open(os.path.join(outdir, "corpus.jsonl"), "w", encoding="utf-8") as fh:
        for doc_id, text in task.corpus.items():
            fh.write(json.dumps({"id": doc_id, "text": text}, ensure_ascii=False) + "\n")
    write_qrels(task.qrels, os.path.join(outdir, "qrels.txt"))
    manifest = {
        "kind": task.kind,
        "n_queries": len(task.queries),
        "n_corpus": len(task.corpus),
        "n_qrels": sum(len(task.qrels.relevant(q)) for q in task.qrels),
        **task.meta,
        **(manifest_extra or {}),
    }
    tmp = os.path.join(outdir, "task_manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(outdir, "task_manifest.json"))


def read_task(taskdir: str) -> tuple[dict[str, str], dict[str, str], Qrels]:
    """Load a written task directory back: (queries, corpus, qrels)."""
    from .metrics import read_qrels

    def load_jsonl(path: str) -> dict[str, str]:
        out: dict[str, str] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    out[rec["id"]] = rec["text"]
        return out

    queries = load_jsonl(os.path.join(taskdir, "queries.jsonl"))
    corpus = load_jsonl(os.path.join(taskdir, "corpus.jsonl"))
    qrels = read_qrels(os.path.join(taskdir, "qrels.txt"))
    return queries, corpus, qrels
