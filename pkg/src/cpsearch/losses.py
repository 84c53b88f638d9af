"""Contrastive training objectives with forward values and exact gradients.

Four objectives over unit-norm embeddings, all reduced by the arithmetic
mean over the batch:

* ``infonce``        -- single-positive softmax contrast; each query i is
  scored against every positive j in the batch (own positive included in
  the denominator, so per-example terms are >= 0).
* ``multipos_infonce`` -- numerator sums exp-similarities over the m
  positives of query i; denominator sums exp-similarities over the other
  batch items j != i. The denominator excludes j = i entirely, so the
  value carries no sign guarantee.
* ``group_infonce``  -- contrasts the mean group similarity of the own
  group against other queries and other groups, plus a per-example
  population-variance penalty over within-group similarities scaled by
  1/tau^2.
* ``triplet_margin`` -- hinge on sim(a, n) - sim(a, p) + margin.

Similarity is the plain dot product: inputs are produced unit-norm
upstream, which makes the dot product equal cosine similarity. Gradients
are exact partial derivatives with respect to every raw vector entry; all
math runs in float64.

The ``sim(x_i, x_j)`` denominator term of the multi-positive and group
objectives reads ``x_j`` as the other *query* by default; set
``cross_query_negatives=False`` in LossConfig for the alternative reading
where it denominates over the members of other positive groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

OBJECTIVES = ("infonce", "multipos", "group_infonce", "triplet")


@dataclass
class LossConfig:
    """Objective selection plus its scalar knobs."""

    objective: str = "group_infonce"
    tau: float = 0.07
    margin: float = 0.0
    variance_penalty: bool = True
    variance_kind: str = "population"
    cross_query_negatives: bool = True

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective {self.objective!r} not in {OBJECTIVES}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        if self.variance_kind != "population":
            raise ValueError("only population variance is supported")


class EncodedBatch:
    """N unit-norm queries with N groups of exactly m unit-norm positives."""

    def __init__(self, queries: np.ndarray, groups: np.ndarray, validate: bool = True):
        queries = np.asarray(queries, dtype=np.float64)
        groups = np.asarray(groups, dtype=np.float64)
        if queries.ndim != 2:
            raise ValueError("queries must have shape (N, dim)")
        if groups.ndim != 3:
            raise ValueError("groups must have shape (N, m, dim)")
        n, dim = queries.shape
        if n < 2:
            raise ValueError(f"batch size must be >= 2, got {n}")
        if groups.shape[0] != n or groups.shape[2] != dim:
            raise ValueError(
                f"groups shape {groups.shape} incompatible with queries {queries.shape}"
            )
        if groups.shape[1] < 1:
            raise ValueError("group size m must be >= 1")
        if validate:
            for name, arr in (("query", queries), ("group", groups.reshape(-1, dim))):
                norms = np.linalg.norm(arr, axis=1)
                worst = float(np.max(np.abs(norms - 1.0)))
                if worst > 1e-6:
                    raise ValueError(
                        f"{name} vectors must be unit norm (worst deviation {worst:.2e})"
                    )
        self.queries = queries
        self.groups = groups

    @property
    def n(self) -> int:
        return self.queries.shape[0]

    @property
    def m(self) -> int:
        return self.groups.shape[1]

    @property
    def dim(self) -> int:
        return self.queries.shape[1]


@dataclass
class LossOutput:
    """Scalar loss plus gradients w.r.t. every input embedding.

    grad_groups follows the group layout (N, m, dim). For the triplet
    objective m is 2: index 0 holds the positive gradient, index 1 the
    negative gradient.
    """

    value: float
    grad_queries: np.ndarray
    grad_groups: np.ndarray
    per_example: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not np.isfinite(self.value):
            raise NumericError(f"non-finite loss value {self.value}")
        if not (np.all(np.isfinite(self.grad_queries)) and np.all(np.isfinite(self.grad_groups))):
            raise NumericError("non-finite entries in loss gradients")


def _logsumexp_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp; -inf entries are treated as absent terms."""
    mx = np.max(scores, axis=1, keepdims=True)
    out = mx + np.log(np.sum(np.exp(scores - mx), axis=1, keepdims=True))
    return out.ravel()


def group_similarity(query: np.ndarray, group: np.ndarray) -> float:
    """Arithmetic mean of the query's dot products with each group member."""
    query = np.asarray(query, dtype=np.float64)
    group = np.asarray(group, dtype=np.float64)
    if group.ndim != 2 or group.shape[0] < 1:
        raise ValueError("group must be a non-empty (m, dim) array")
    return float(np.mean(group @ query))


def infonce(batch: EncodedBatch, cfg: LossConfig) -> LossOutput:
    """Single-positive contrastive loss; requires m = 1.

    Per example: -log( exp(q_i.p_i/tau) / sum_j exp(q_i.p_j/tau) ) with j
    running over all N positives in the batch.
    """
    if batch.m != 1:
        raise ValueError(f"infonce requires m=1, got m={batch.m}")
    tau = cfg.tau
    n = batch.n
    q = batch.queries
    p = batch.groups[:, 0, :]
    scores = (q @ p.T) / tau
    lse = _logsumexp_rows(scores)
    per_example = -np.diag(scores) + lse
    weights = np.exp(scores - lse[:, None])
    coef = (weights - np.eye(n)) / (tau * n)
    grad_q = coef @ p
    grad_p = coef.T @ q
    return LossOutput(
        value=float(np.mean(per_example)),
        grad_queries=grad_q,
        grad_groups=grad_p[:, None, :],
        per_example=per_example,
    )


def multipos_infonce(batch: EncodedBatch, cfg: LossConfig) -> LossOutput:
    """Multi-positive contrastive loss.

    Per example: -log( sum_k exp(q_i.p_ik/tau) / D_i ) where D_i sums
    exp-similarities against the other batch items (j != i): the other
    queries by default, or all members of other groups when
    cross_query_negatives is off.
    """
    tau = cfg.tau
    n, m = batch.n, batch.m
    if n < 2:
        raise ValueError("multipos_infonce needs N >= 2 (empty denominator)")
    q = batch.queries
    g = batch.groups

    own = np.einsum("nd,nkd->nk", q, g) / tau          # (N, m)
    lse_num = _logsumexp_rows(own)
    alpha = np.exp(own - lse_num[:, None])             # softmax over own positives

    grad_q = -np.einsum("nk,nkd->nd", alpha, g)
    grad_g = -alpha[:, :, None] * q[:, None, :]

    if cfg.cross_query_negatives:
        ss = (q @ q.T) / tau
        np.fill_diagonal(ss, -np.inf)
        lse_den = _logsumexp_rows(ss)
        beta = np.exp(ss - lse_den[:, None])           # zero on the diagonal
        grad_q += beta @ q + beta.T @ q
    else:
        cross = np.einsum("id,jkd->ijk", q, g) / tau   # (N, N, m)
        cross[np.arange(n), np.arange(n), :] = -np.inf
        lse_den = _logsumexp_rows(cross.reshape(n, n * m))
        beta = np.exp(cross - lse_den[:, None, None])  # zero where j == i
        grad_q += np.einsum("ijk,jkd->id", beta, g)
        grad_g += np.einsum("ijk,id->jkd", beta, q)

    per_example = -lse_num + lse_den
    return LossOutput(
        value=float(np.mean(per_example)),
        grad_queries=grad_q / (tau * n),
        grad_groups=grad_g / (tau * n),
        per_example=per_example,
    )


def group_infonce(batch: EncodedBatch, cfg: LossConfig) -> LossOutput:
    """Group contrastive loss with a within-group variance penalty.

    Per example:
    -log( exp(sG(i,i)/tau) / ( exp(sG(i,i)/tau)
          + sum_{j!=i} [ exp(sim(q_i, q_j)/tau) + exp(sG(i,j)/tau) ] ) )
    + Var_k( sim(q_i, p_ik) ) / tau^2

    where sG(i, j) is the arithmetic mean of the similarities between
    q_i and the members of group j, and Var is the population variance
    (exactly zero when m = 1 or when all member similarities coincide).
    The -log term is >= 0 because its numerator appears in its
    denominator. The penalty can be disabled via cfg.variance_penalty.
    """
    tau = cfg.tau
    n, m = batch.n, batch.m
    if n < 2:
        raise ValueError("group_infonce needs N >= 2")
    q = batch.queries
    g = batch.groups
    gbar = np.mean(g, axis=1)                       # mean member of each group

    gsim = (q @ gbar.T) / tau                       # sG(i, j)/tau, diagonal = numerator
    if cfg.cross_query_negatives:
        other = (q @ q.T) / tau
        np.fill_diagonal(other, -np.inf)
        denom = np.hstack([gsim, other])
    else:
        cross = np.einsum("id,jkd->ijk", q, g) / tau
        cross[np.arange(n), np.arange(n), :] = -np.inf
        denom = np.hstack([gsim, cross.reshape(n, n * m)])

    lse = _logsumexp_rows(denom)
    per_example = -np.diag(gsim) + lse

    wg = np.exp(gsim - lse[:, None])
    coef_g = (wg - np.eye(n)) / (tau * n)
    grad_q = coef_g @ gbar
    grad_g = np.repeat((coef_g.T @ q)[:, None, :] / m, m, axis=1)

    if cfg.cross_query_negatives:
        ws = np.exp(other - lse[:, None])           # zero on the diagonal
        coef_s = ws / (tau * n)
        grad_q += coef_s @ q + coef_s.T @ q
    else:
        wc = np.exp(cross - lse[:, None, None])     # zero where j == i
        coef_c = wc / (tau * n)
        grad_q += np.einsum("ijk,jkd->id", coef_c, g)
        grad_g += np.einsum("ijk,id->jkd", coef_c, q)

    if cfg.variance_penalty:
        own = np.einsum("nd,nkd->nk", q, g)         # member similarities, unscaled
        dev = own - np.mean(own, axis=1, keepdims=True)
        variance = np.mean(dev * dev, axis=1)
        per_example = per_example + variance / tau**2
        pk = 2.0 * dev / (m * tau**2 * n)
        grad_q += np.einsum("nk,nkd->nd", pk, g)
        grad_g += pk[:, :, None] * q[:, None, :]

    return LossOutput(
        value=float(np.mean(per_example)),
        grad_queries=grad_q,
        grad_groups=grad_g,
        per_example=per_example,
    )


def compute_loss(batch: EncodedBatch, cfg: LossConfig) -> LossOutput:
    """Dispatch a contrastive objective by name (triplet takes vectors)."""
    if cfg.objective == "infonce":
        return infonce(batch, cfg)
    if cfg.objective == "multipos":
        return multipos_infonce(batch, cfg)
    if cfg.objective == "group_infonce":
        return group_infonce(batch, cfg)
    raise ValueError(
        f"objective {cfg.objective!r} does not operate on an EncodedBatch"
    )


def triplet_margin(
    anchor: np.ndarray,
    positive: np.ndarray,
    negative: np.ndarray,
    cfg: LossConfig,
) -> LossOutput:
    """Hinge loss max(0, sim(a, n) - sim(a, p) + margin), batch-averaged.

    Accepts single (dim,) vectors or (N, dim) batches. grad_groups packs
    [positive, negative] along axis 1.
    """
    a = np.atleast_2d(np.asarray(anchor, dtype=np.float64))
    p = np.atleast_2d(np.asarray(positive, dtype=np.float64))
    ng = np.atleast_2d(np.asarray(negative, dtype=np.float64))
    if not (a.shape == p.shape == ng.shape):
        raise ValueError("anchor, positive and negative must share a shape")
    n = a.shape[0]
    raw = np.sum(a * ng, axis=1) - np.sum(a * p, axis=1) + cfg.margin
    active = (raw > 0).astype(np.float64)
    per_example = np.maximum(raw, 0.0)
    scale = active[:, None] / n
    grad_a = scale * (ng - p)
    grad_p = -scale * a
    grad_n = scale * a
    return LossOutput(
        value=float(np.mean(per_example)),
        grad_queries=grad_a,
        grad_groups=np.stack([grad_p, grad_n], axis=1),
        per_example=per_example,
    )
