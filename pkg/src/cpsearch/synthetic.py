"""Synthetic separable corpora for end-to-end exercises.

Each generated problem owns a few rare marker tokens that recur in its
statement and in all of its solutions, on top of filler text shared by
everyone. Character n-grams of the markers make nearest-neighbor
retrieval information-theoretically easy, which is exactly what the
training and evaluation smoke checks need: a corpus where a correct
pipeline must reach near-perfect NDCG.
"""

from __future__ import annotations

from datetime import date, timedelta

import numpy as np

from .corpus import Corpus, DuplicatePair, Problem, SimplifiedPair, Solution

_FILLER_WORDS = (
    "given array compute answer queries modulo graph tree node edge cost "
    "minimum maximum count subsequence string prefix segment update value"
).split()

_CODE_FILLER = (
    "int long for while if else return vector push read scan print main "
    "size begin end sort swap template const auto break continue"
).split()

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _marker(rng: np.random.Generator) -> str:
    # rare 6-letter token; 'q', 'x', 'z' heavy so filler n-grams never collide
    rare = "qxzjvw"
    return "".join(
        rng.choice(list(rare if i % 2 == 0 else _LETTERS)) for i in range(6)
    )


def _sentence(rng: np.random.Generator, words: tuple[str, ...] | list[str], n: int) -> str:
    return " ".join(str(rng.choice(words)) for _ in range(n))


def make_separable_corpus(
    n_problems: int = 200,
    solutions_per_problem: int = 5,
    seed: int = 0,
    markers_per_problem: int = 3,
) -> tuple[Corpus, list[Solution]]:
    """Problems and solutions with planted shared rare n-grams."""
    rng = np.random.default_rng(seed)
    problems: list[Problem] = []
    solutions: list[Solution] = []
    base = date(2021, 1, 6)
    for i in range(n_problems):
        markers = [_marker(rng) for _ in range(markers_per_problem)]
        marked = " ".join(markers)
        statement = "\n".join(
            [
                f"Task {i}: {_sentence(rng, _FILLER_WORDS, 6)} {marked}.",
                f"You must handle {marked} with {_sentence(rng, _FILLER_WORDS, 4)}.",
                "Input Format",
                f"First line holds n and the {markers[0]} parameters.",
                "Output Format",
                f"Print the {markers[1]} result.",
                "Constraints",
                "1 <= n <= 100000",
                "Example",
                "3 -> 7",
            ]
        )
        problems.append(
            Problem(
                id=f"p{i:04d}",
                source="alpha" if i % 2 == 0 else "beta",
                statement=statement,
                statement_language="en",
                format="icpc" if i % 3 else "oi",
                timestamp=base + timedelta(days=7 * i),
                difficulty=("easy", "medium", "hard")[i % 3],
            )
        )
        for j in range(solutions_per_problem):
            code = " ".join(
                [
                    f"// solve {markers[j % markers_per_problem]}",
                    _sentence(rng, _CODE_FILLER, 8),
                    f"answer({marked});",
                    _sentence(rng, _CODE_FILLER, 5),
                ]
            )
            solutions.append(
                Solution(
                    id=f"s{i:04d}_{j}",
                    problem_id=f"p{i:04d}",
                    code=code,
                    language="cpp" if j % 2 == 0 else "py",
                )
            )
    return Corpus(problems), solutions


def make_duplicate_pairs(
    corpus: Corpus, n_clusters: int = 12, seed: int = 0
) -> list[DuplicatePair]:
    """Chain random problems into duplicate clusters of size 2-4."""
    rng = np.random.default_rng(seed)
    ids = corpus.ids
    picked = rng.choice(len(ids), size=min(len(ids), n_clusters * 4), replace=False)
    pairs: list[DuplicatePair] = []
    pos = 0
    for _ in range(n_clusters):
        size = int(rng.integers(2, 5))
        members = [ids[int(k)] for k in picked[pos : pos + size]]
        pos += size
        if len(members) < 2:
            break
        for a, b in zip(members, members[1:]):
            level = ("exact", "near", "method")[int(rng.integers(3))]
            pairs.append(DuplicatePair(problem_a=a, problem_b=b, level=level))
    return pairs


def make_simplified_pairs(
    corpus: Corpus, n_pairs: int, seed: int = 0
) -> tuple[list[Problem], list[SimplifiedPair]]:
    """Simplified variants of the first n_pairs problems, as new records.

    Returns the new simplified Problem records (callers add them to a
    combined corpus) and the pair annotations.
    """
    rng = np.random.default_rng(seed)
    new_problems: list[Problem] = []
    pairs: list[SimplifiedPair] = []
    for problem in list(corpus)[:n_pairs]:
        first_line = problem.statement.split("\n", 1)[0]
        sim플 = None  # noqa: F841  (placeholder removed below)
        simplified_text = f"Short version: {first_line} {_sentence(rng, _FILLER_WORDS, 3)}"
        sid = f"simp_{problem.id}"
        new_problems.append(
            Problem(
                id=sid,
                source="gamma",
                statement=simplified_text,
                statement_language="en",
                format=problem.format,
                timestamp=problem.timestamp,
            )
        )
        pairs.append(SimplifiedPair(simplified_id=sid, full_id=problem.id))
    return new_problems, pairs
