"""Similarity-aware benchmark audit.

Given externally supplied per-model pass rates and embeddings for an
evaluation set plus a historical corpus, this module computes each
evaluation problem's maximum cosine similarity to history, bins problems
by that similarity, fits per-stratum regression lines of pass rate on
similarity, and tabulates how the spread between model variants changes
across bins. Outputs are plot-ready CSV tables; no plotting here.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from datetime import date

import numpy as np

from .embedder import EmbeddingMatrix
from .errors import DataError
from .index import SearchIndex, max_similarity

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PassRecord:
    """One model's pass rate on one problem."""

    problem_id: str
    model: str
    pass_rate: float
    difficulty: str
    release_date: date | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.pass_rate <= 1.0:
            raise DataError(
                f"pass_rate {self.pass_rate} for {self.problem_id!r} not in [0, 1]"
            )


@dataclass(frozen=True)
class MaxSimilarity:
    problem_id: str
    max_sim: float
    nearest_id: str


def read_pass_records(path: str) -> list[PassRecord]:
    """Load pass_records.csv: problem_id,model,pass_rate,difficulty,release_date."""
    records: list[PassRecord] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"problem_id", "model", "pass_rate", "difficulty", "release_date"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: expected header with columns {sorted(required)}")
        for row in reader:
            release = row["release_date"].strip()
            records.append(
                PassRecord(
                    problem_id=row["problem_id"],
                    model=row["model"],
                    pass_rate=float(row["pass_rate"]),
                    difficulty=row["difficulty"],
                    release_date=date.fromisoformat(release) if release else None,
                )
            )
    if not records:
        raise DataError(f"{path}: no pass records")
    return records


def compute_max_similarity(
    eval_embeddings: EmbeddingMatrix,
    historical_index: SearchIndex,
    date_guard: bool = False,
    eval_dates: dict[str, date] | None = None,
    hist_dates: dict[str, date] | None = None,
) -> list[MaxSimilarity]:
    """Max cosine of each evaluation problem against the historical corpus.

    Exact-id matches are excluded from their own maximum. With date_guard,
    every historical item must predate every evaluation item.
    """
    if len(historical_index) == 0:
        raise DataError("historical corpus is empty")
    if date_guard:
        if not eval_dates or not hist_dates:
            raise DataError("date_guard requires dates for both sides")
        newest_hist = max(hist_dates.values())
        oldest_eval = min(eval_dates.values())
        if newest_hist >= oldest_eval:
            raise DataError(
                f"date guard violated: historical item at {newest_hist} does not "
                f"predate evaluation item at {oldest_eval}"
            )
    out: list[MaxSimilarity] = []
    for i, pid in enumerate(eval_embeddings.ids):
        doc_id, score = max_similarity(
            historical_index,
            eval_embeddings.vectors[i].astype(np.float64),
            exclude={pid},
        )
        out.append(MaxSimilarity(problem_id=pid, max_sim=score, nearest_id=doc_id))
    return out


def default_bin_edges(sims: np.ndarray, width: float = 0.1) -> list[float]:
    """0.1-wide edges spanning the data range (at least one full bin)."""
    lo = np.floor(float(np.min(sims)) / width) * width
    hi = np.ceil(float(np.max(sims)) / width) * width
    if hi <= lo:
        hi = lo + width
    n = int(round((hi - lo) / width))
    return [round(lo + i * width, 10) for i in range(n + 1)]


def assign_bins(sims: np.ndarray, edges: list[float]) -> np.ndarray:
    """Half-open bins [e_i, e_i+1); the last bin is closed on the right.

    Values outside [first, last] are clamped into the end bins with a
    warning.
    """
    if len(edges) < 2:
        raise DataError("need at least 2 bin edges")
    edges_arr = np.asarray(edges, dtype=np.float64)
    if np.any(np.diff(edges_arr) <= 0):
        raise DataError("bin edges must be strictly increasing")
    sims = np.asarray(sims, dtype=np.float64)
    if np.any(sims < edges_arr[0]) or np.any(sims > edges_arr[-1]):
        logger.warning("similarities outside [%s, %s] clamped", edges[0], edges[-1])
    idx = np.searchsorted(edges_arr, sims, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


@dataclass
class BinRow:
    lo: float
    hi: float
    count: int
    mean_pass: float
    median_pass: float


def bin_and_aggregate(
    records: list[PassRecord],
    sims: dict[str, float],
    bin_edges: list[float],
) -> list[BinRow]:
    """Per-bin mean/median of per-problem average pass rates.

    Each problem's pass rate is first averaged across models, then
    problems are grouped by the bin of their max similarity.
    """
    by_problem: dict[str, list[float]] = {}
    for rec in records:
        by_problem.setdefault(rec.problem_id, []).append(rec.pass_rate)
    missing = [pid for pid in by_problem if pid not in sims]
    if missing:
        raise DataError(f"no similarity for problems: {missing[:5]}")
    pids = sorted(by_problem)
    sim_arr = np.array([sims[p] for p in pids])
    pass_arr = np.array([float(np.mean(by_problem[p])) for p in pids])
    bins = assign_bins(sim_arr, bin_edges)
    rows: list[BinRow] = []
    for b in range(len(bin_edges) - 1):
        mask = bins == b
        count = int(np.sum(mask))
        rows.append(
            BinRow(
                lo=bin_edges[b],
                hi=bin_edges[b + 1],
                count=count,
                mean_pass=float(np.mean(pass_arr[mask])) if count else float("nan"),
                median_pass=float(np.median(pass_arr[mask])) if count else float("nan"),
            )
        )
    return rows


@dataclass
class RegressionRow:
    stratum: str
    slope: float
    intercept: float
    n: int


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    design = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(coef[0]), float(coef[1])


def stratified_regression(
    records: list[PassRecord],
    sims: dict[str, float],
    stratum: str = "difficulty",
) -> list[RegressionRow]:
    """OLS of pass rate on max similarity per stratum, plus an all-data line.

    stratum is "difficulty" (points are per-problem mean pass rates) or
    "model" (points are per-record pass rates). Strata with fewer than two
    distinct similarity values are skipped with a warning.
    """
    if stratum not in ("difficulty", "model"):
        raise ValueError(f"unknown stratum {stratum!r}")

    def points_of(recs: list[PassRecord], average: bool) -> tuple[np.ndarray, np.ndarray]:
        if average:
            by_problem: dict[str, list[float]] = {}
            for r in recs:
                by_problem.setdefault(r.problem_id, []).append(r.pass_rate)
            pids = sorted(by_problem)
            return (
                np.array([sims[p] for p in pids]),
                np.array([float(np.mean(by_problem[p])) for p in pids]),
            )
        return (
            np.array([sims[r.problem_id] for r in recs]),
            np.array([r.pass_rate for r in recs]),
        )

    groups: dict[str, list[PassRecord]] = {}
    for rec in records:
        key = rec.difficulty if stratum == "difficulty" else rec.model
        groups.setdefault(key, []).append(rec)

    rows: list[RegressionRow] = []
    average = stratum == "difficulty"
    for key in sorted(groups):
        x, y = points_of(groups[key], average)
        if len(np.unique(x)) < 2:
            logger.warning("stratum %r has constant similarities; skipped", key)
            continue
        slope, intercept = _ols(x, y)
        rows.append(RegressionRow(stratum=key, slope=slope, intercept=intercept, n=len(x)))
    x, y = points_of(records, True)
    if len(np.unique(x)) >= 2:
        slope, intercept = _ols(x, y)
        rows.append(RegressionRow(stratum="all", slope=slope, intercept=intercept, n=len(x)))
    return rows


@dataclass
class GapRow:
    lo: float
    hi: float
    count: int
    variant_means: dict[str, float]
    gap: float


def variant_gap(
    records: list[PassRecord],
    sims: dict[str, float],
    bin_edges: list[float],
) -> list[GapRow]:
    """Max-min spread of per-variant mean pass rates within each bin.

    Restricted to problems covered by every variant so the means are
    comparable; errors out if the variants share no problems.
    """
    variants = sorted({r.model for r in records})
    if len(variants) < 2:
        raise DataError("need >= 2 model variants")
    coverage: dict[str, set[str]] = {v: set() for v in variants}
    rate: dict[tuple[str, str], float] = {}
    for r in records:
        coverage[r.model].add(r.problem_id)
        rate[(r.model, r.problem_id)] = r.pass_rate
    shared = set.intersection(*coverage.values())
    if not shared:
        raise DataError("model variants have disjoint problem coverage")
    pids = sorted(shared)
    sim_arr = np.array([sims[p] for p in pids])
    bins = assign_bins(sim_arr, bin_edges)
    rows: list[GapRow] = []
    for b in range(len(bin_edges) - 1):
        members = [p for p, idx in zip(pids, bins) if idx == b]
        if members:
            means = {
                v: float(np.mean([rate[(v, p)] for p in members])) for v in variants
            }
            gap = max(means.values()) - min(means.values())
        else:
            means = {v: float("nan") for v in variants}
            gap = float("nan")
        rows.append(
            GapRow(lo=bin_edges[b], hi=bin_edges[b + 1], count=len(members),
                   variant_means=means, gap=gap)
        )
    return rows


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def write_report_csv(sims: list[MaxSimilarity], bins: np.ndarray, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["problem_id", "max_sim", "nearest_id", "bin"])
        for rec, b in zip(sims, bins):
            writer.writerow([rec.problem_id, repr(rec.max_sim), rec.nearest_id, int(b)])


def write_bins_csv(rows: list[BinRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", "mean_pass", "median_pass"])
        for row in rows:
            writer.writerow([row.lo, row.hi, row.count, repr(row.mean_pass), repr(row.median_pass)])


def write_regression_csv(rows: list[RegressionRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stratum", "slope", "intercept", "n"])
        for row in rows:
            writer.writerow([row.stratum, repr(row.slope), repr(row.intercept), row.n])


def write_gaps_csv(rows: list[GapRow], path: str) -> None:
    variants = sorted(rows[0].variant_means) if rows else []
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count", *variants, "gap"])
        for row in rows:
            writer.writerow(
                [row.lo, row.hi, row.count]
                + [repr(row.variant_means[v]) for v in variants]
                + [repr(row.gap)]
            )
