"""Canonical data model for problems, solutions and annotated pairs.

Everything is ingested from line-oriented JSONL files (one object per line,
UTF-8, LF-terminated). Malformed lines never kill a lenient ingest; they are
returned as rejection records and optionally echoed to a log stream as
``LINE <n>: <reason>``. Duplicate problem ids are always fatal.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from typing import IO, Iterable, Iterator

from .errors import DataError

STATEMENT_LANGUAGES = ("en", "zh", "ja", "other")
PROBLEM_FORMATS = ("icpc", "oi")
DIFFICULTIES = ("easy", "medium", "hard")
DUPLICATE_LEVELS = ("exact", "near", "method")


@dataclass
class Problem:
    """One contest problem with source and timestamp metadata."""

    id: str
    source: str
    statement: str
    statement_language: str
    format: str
    timestamp: date
    difficulty: str | None = None
    url: str | None = None


@dataclass
class Solution:
    """An accepted solution attached to a problem."""

    id: str
    problem_id: str
    code: str
    language: str
    verdict: str = "accepted"


@dataclass(frozen=True)
class DuplicatePair:
    problem_a: str
    problem_b: str
    level: str


@dataclass(frozen=True)
class SimplifiedPair:
    simplified_id: str
    full_id: str


@dataclass(frozen=True)
class Rejection:
    """A line that failed ingestion, with its 1-based line number."""

    line_no: int
    reason: str

    def __str__(self) -> str:
        return f"LINE {self.line_no}: {self.reason}"


class Corpus:
    """An ordered, read-only collection of problems keyed by id."""

    def __init__(self, problems: Iterable[Problem] = ()):
        self._problems: dict[str, Problem] = {}
        for p in problems:
            if p.id in self._problems:
                raise DataError(f"duplicate problem id {p.id!r}")
            self._problems[p.id] = p

    def __len__(self) -> int:
        return len(self._problems)

    def __contains__(self, problem_id: str) -> bool:
        return problem_id in self._problems

    def __iter__(self) -> Iterator[Problem]:
        return iter(self._problems.values())

    def __getitem__(self, problem_id: str) -> Problem:
        return self._problems[problem_id]

    @property
    def ids(self) -> list[str]:
        return list(self._problems)

    def get(self, problem_id: str) -> Problem | None:
        return self._problems.get(problem_id)


def _parse_timestamp(raw: object) -> date:
    """Parse YYYY-MM-DD, or YYYY-MM with the day defaulting to the 1st."""
    if not isinstance(raw, str) or not raw:
        raise ValueError("timestamp must be a non-empty string")
    parts = raw.split("-")
    if len(parts) == 2:
        raw = raw + "-01"
    try:
        return date.fromisoformat(raw)
    except ValueError:
        raise ValueError(f"timestamp {raw!r} is not a valid calendar date")


def _require_str(obj: dict, key: str, *, allow_empty: bool = False) -> str:
    val = obj.get(key)
    if not isinstance(val, str):
        raise ValueError(f"missing or non-string field {key!r}")
    if not allow_empty and not val.strip():
        raise ValueError(f"field {key!r} is empty")
    return val


def parse_problem(obj: dict) -> Problem:
    """Build a validated Problem from a decoded JSON object."""
    pid = _require_str(obj, "id")
    source = _require_str(obj, "source")
    statement = _require_str(obj, "statement")
    lang = _require_str(obj, "statement_language")
    if lang not in STATEMENT_LANGUAGES:
        raise ValueError(f"statement_language {lang!r} not in {STATEMENT_LANGUAGES}")
    fmt = _require_str(obj, "format")
    if fmt not in PROBLEM_FORMATS:
        raise ValueError(f"format {fmt!r} not in {PROBLEM_FORMATS}")
    ts = _parse_timestamp(obj.get("timestamp"))
    difficulty = obj.get("difficulty")
    if difficulty is not None and difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty {difficulty!r} not in {DIFFICULTIES}")
    url = obj.get("url")
    if url is not None and not isinstance(url, str):
        raise ValueError("url must be a string when present")
    return Problem(
        id=pid,
        source=source,
        statement=statement,
        statement_language=lang,
        format=fmt,
        timestamp=ts,
        difficulty=difficulty,
        url=url,
    )


def _iter_jsonl(path: str) -> Iterator[tuple[int, str]]:
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            yield line_no, line.rstrip("\n")


def ingest_problems(
    path: str,
    strict: bool = False,
    log: IO[str] | None = None,
) -> tuple[Corpus, list[Rejection]]:
    """Load a problems.jsonl file.

    Returns the corpus of valid records plus one rejection per malformed
    line. A duplicate id is fatal in both modes; in strict mode any
    rejection aborts with a DataError naming the line.
    """
    problems: dict[str, Problem] = {}
    rejections: list[Rejection] = []

    def reject(line_no: int, reason: str) -> None:
        rej = Rejection(line_no, reason)
        if log is not None:
            log.write(str(rej) + "\n")
        if strict:
            raise DataError(str(rej))
        rejections.append(rej)

    for line_no, line in _iter_jsonl(path):
        if not line.strip():
            reject(line_no, "blank line")
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            reject(line_no, f"invalid JSON: {exc.msg}")
            continue
        if not isinstance(obj, dict):
            reject(line_no, "record is not a JSON object")
            continue
        try:
            problem = parse_problem(obj)
        except ValueError as exc:
            reject(line_no, str(exc))
            continue
        if problem.id in problems:
            raise DataError(f"LINE {line_no}: duplicate problem id {problem.id!r}")
        problems[problem.id] = problem

    return Corpus(problems.values()), rejections


def parse_solution(obj: dict) -> Solution:
    sid = _require_str(obj, "id")
    problem_id = _require_str(obj, "problem_id")
    code = _require_str(obj, "code")
    language = _require_str(obj, "language")
    verdict = obj.get("verdict", "accepted")
    if verdict != "accepted":
        raise ValueError(f"verdict {verdict!r} is not 'accepted'")
    return Solution(id=sid, problem_id=problem_id, code=code, language=language)


def ingest_solutions(
    path: str,
    corpus: Corpus,
    strict: bool = False,
    log: IO[str] | None = None,
) -> tuple[list[Solution], list[Rejection]]:
    """Load solutions.jsonl, keeping only records that resolve against corpus.

    Dangling problem_id lines, duplicate solution ids and non-accepted
    verdicts become rejections.
    """
    solutions: list[Solution] = []
    seen_ids: set[str] = set()
    rejections: list[Rejection] = []

    def reject(line_no: int, reason: str) -> None:
        rej = Rejection(line_no, reason)
        if log is not None:
            log.write(str(rej) + "\n")
        if strict:
            raise DataError(str(rej))
        rejections.append(rej)

    for line_no, line in _iter_jsonl(path):
        if not line.strip():
            reject(line_no, "blank line")
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            reject(line_no, f"invalid JSON: {exc.msg}")
            continue
        if not isinstance(obj, dict):
            reject(line_no, "record is not a JSON object")
            continue
        try:
            sol = parse_solution(obj)
        except ValueError as exc:
            reject(line_no, str(exc))
            continue
        if sol.problem_id not in corpus:
            reject(line_no, f"unknown problem_id {sol.problem_id!r}")
            continue
        if sol.id in seen_ids:
            reject(line_no, f"duplicate solution id {sol.id!r}")
            continue
        seen_ids.add(sol.id)
        solutions.append(sol)

    return solutions, rejections


def ingest_duplicate_pairs(
    path: str,
    corpus: Corpus,
    strict: bool = False,
    log: IO[str] | None = None,
) -> tuple[list[DuplicatePair], list[Rejection]]:
    """Load dup_pairs.jsonl records {problem_a, problem_b, level}."""
    pairs: list[DuplicatePair] = []
    rejections: list[Rejection] = []

    def reject(line_no: int, reason: str) -> None:
        rej = Rejection(line_no, reason)
        if log is not None:
            log.write(str(rej) + "\n")
        if strict:
            raise DataError(str(rej))
        rejections.append(rej)

    for line_no, line in _iter_jsonl(path):
        if not line.strip():
            reject(line_no, "blank line")
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            reject(line_no, f"invalid JSON: {exc.msg}")
            continue
        try:
            a = _require_str(obj, "problem_a")
            b = _require_str(obj, "problem_b")
            level = _require_str(obj, "level")
            if level not in DUPLICATE_LEVELS:
                raise ValueError(f"level {level!r} not in {DUPLICATE_LEVELS}")
            if a == b:
                raise ValueError("problem_a equals problem_b")
            for pid in (a, b):
                if pid not in corpus:
                    raise ValueError(f"unknown problem id {pid!r}")
        except ValueError as exc:
            reject(line_no, str(exc))
            continue
        pairs.append(DuplicatePair(problem_a=a, problem_b=b, level=level))

    return pairs, rejections


def ingest_simplified_pairs(
    path: str,
    corpus: Corpus,
    strict: bool = False,
    log: IO[str] | None = None,
) -> tuple[list[SimplifiedPair], list[Rejection]]:
    """Load simplified_pairs.jsonl records {simplified_id, full_id}."""
    pairs: list[SimplifiedPair] = []
    rejections: list[Rejection] = []

    def reject(line_no: int, reason: str) -> None:
        rej = Rejection(line_no, reason)
        if log is not None:
            log.write(str(rej) + "\n")
        if strict:
            raise DataError(str(rej))
        rejections.append(rej)

    for line_no, line in _iter_jsonl(path):
        if not line.strip():
            reject(line_no, "blank line")
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            reject(line_no, f"invalid JSON: {exc.msg}")
            continue
        try:
            simp = _require_str(obj, "simplified_id")
            full = _require_str(obj, "full_id")
            if simp == full:
                raise ValueError("simplified_id equals full_id")
            for pid in (simp, full):
                if pid not in corpus:
                    raise ValueError(f"unknown problem id {pid!r}")
        except ValueError as exc:
            reject(line_no, str(exc))
            continue
        pairs.append(SimplifiedPair(simplified_id=simp, full_id=full))

    return pairs, rejections


def problem_to_record(problem: Problem) -> dict:
    rec = {
        "id": problem.id,
        "source": problem.source,
        "statement": problem.statement,
        "statement_language": problem.statement_language,
        "format": problem.format,
        "timestamp": problem.timestamp.isoformat(),
    }
    if problem.difficulty is not None:
        rec["difficulty"] = problem.difficulty
    if problem.url is not None:
        rec["url"] = problem.url
    return rec


def write_problems(corpus: Corpus, path: str) -> None:
    """Serialize a corpus back to problems.jsonl (round-trips with ingest)."""
    with open(path, "w", encoding="utf-8") as fh:
        for problem in corpus:
            fh.write(json.dumps(problem_to_record(problem), ensure_ascii=False))
            fh.write("\n")


def write_solutions(solutions: Iterable[Solution], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sol in solutions:
            rec = {
                "id": sol.id,
                "problem_id": sol.problem_id,
                "code": sol.code,
                "language": sol.language,
                "verdict": sol.verdict,
            }
            fh.write(json.dumps(rec, ensure_ascii=False))
            fh.write("\n")


@dataclass
class CorpusStats:
    """Count summary over a corpus and its solutions."""

    n_problems: int
    n_solutions: int
    by_source: Counter = field(default_factory=Counter)
    by_statement_language: Counter = field(default_factory=Counter)
    by_format: Counter = field(default_factory=Counter)
    by_year: Counter = field(default_factory=Counter)
    by_code_language: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {
            "n_problems": self.n_problems,
            "n_solutions": self.n_solutions,
            "by_source": dict(sorted(self.by_source.items())),
            "by_statement_language": dict(sorted(self.by_statement_language.items())),
            "by_format": dict(sorted(self.by_format.items())),
            "by_year": {str(k): v for k, v in sorted(self.by_year.items())},
            "by_code_language": dict(sorted(self.by_code_language.items())),
        }


def corpus_stats(corpus: Corpus, solutions: Iterable[Solution] = ()) -> CorpusStats:
    """Counts by source, statement language, format, year and code language."""
    stats = CorpusStats(n_problems=len(corpus), n_solutions=0)
    for p in corpus:
        stats.by_source[p.source] += 1
        stats.by_statement_language[p.statement_language] += 1
        stats.by_format[p.format] += 1
        stats.by_year[p.timestamp.year] += 1
    for s in solutions:
        stats.n_solutions += 1
        stats.by_code_language[s.language] += 1
    return stats
