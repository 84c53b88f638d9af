"""Deterministic mini-batch training of the hashing encoder.

Stage 1 aligns problem statements with their accepted solutions using a
contrastive objective (single-positive, multi-positive or group) with
duplicate-padded group sampling and optional statement masking. Stage 2
fine-tunes a stage-1 model on duplicate-problem and simplified-full
triplets with the margin loss, balanced by per-task downsampling and
round-robin interleaving.

Everything is driven by explicit seeds: fixed (data, config, seed) yields
bit-identical model artifacts. Trained projections are quantized to
float32-representable values before they are returned, so checkpoint
round trips are bit-exact.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Corpus, DuplicatePair, SimplifiedPair, Solution
from .embedder import (
    DEFAULT_EMBED_DIM,
    DEFAULT_NGRAM_RANGE,
    DEFAULT_VOCAB_DIM,
    EncoderModel,
    MaskingPolicy,
    _encode_raw,
    _seed_from,
    apply_masking,
)
from .errors import DataError, FormatError, NumericError
from .losses import EncodedBatch, LossConfig, compute_loss, triplet_margin
from .mining import MinedTriplet

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"CPMD"
MODEL_VERSION = 1

OPTIMIZERS = ("sgd", "adamw")


@dataclass
class TrainConfig:
    """Knobs for both training stages."""

    objective: LossConfig
    batch_size: int = 64
    group_size: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 20
    seed: int = 0
    masking: MaskingPolicy | None = None
    optimizer: str = "adamw"
    vocab_dim: int = DEFAULT_VOCAB_DIM
    embed_dim: int = DEFAULT_EMBED_DIM
    ngram_range: tuple[int, int] = DEFAULT_NGRAM_RANGE
    val_fraction: float = 0.05
    task_cap: int = 1000
    log_path: str | None = None

    def __post_init__(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer {self.optimizer!r} not in {OPTIMIZERS}")
        if self.objective.objective != "triplet" and self.batch_size < 2:
            raise ValueError("contrastive objectives need batch_size >= 2")
        if self.batch_size < 1 or self.group_size < 1 or self.epochs < 1:
            raise ValueError("batch_size, group_size and epochs must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")


@dataclass
class TrainExampleGroup:
    """A query text with at least one positive text."""

    query_text: str
    positives: list[str]

    def __post_init__(self) -> None:
        if not self.positives:
            raise DataError("example has zero positives")


@dataclass
class TripletExample:
    anchor: str
    positive: str
    negative: str

    def __post_init__(self) -> None:
        if not (self.anchor and self.positive and self.negative):
            raise DataError("triplet texts must be non-empty")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_positive_cosine: float | None = None


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SgdOptimizer:
    """p <- p - lr * (grad + weight_decay * p)."""

    def __init__(self, learning_rate: float, weight_decay: float = 0.0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.weight_decay:
            params -= self.learning_rate * (grad + self.weight_decay * params)
        else:
            params -= self.learning_rate * grad


class AdamWOptimizer:
    """Adaptive moments with decoupled weight decay."""

    def __init__(
        self,
        learning_rate: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.learning_rate * (m_hat / (np.sqrt(v_hat) + self.eps))
        if self.weight_decay:
            params -= self.learning_rate * self.weight_decay * params


def make_optimizer(name: str, learning_rate: float, weight_decay: float):
    if name == "sgd":
        return SgdOptimizer(learning_rate, weight_decay)
    if name == "adamw":
        return AdamWOptimizer(learning_rate, weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# Group sampling
# ---------------------------------------------------------------------------

def sample_groups(
    dataset: list[TrainExampleGroup],
    m: int,
    seed: int | np.random.Generator,
) -> list[TrainExampleGroup]:
    """Resample every example to exactly m positives.

    Examples with >= m positives contribute m sampled without
    replacement; smaller ones take everything and pad by uniform
    resampling with replacement.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out: list[TrainExampleGroup] = []
    for ex in dataset:
        k = len(ex.positives)
        if k == 0:
            raise DataError("example has zero positives")
        if k >= m:
            idx = rng.choice(k, size=m, replace=False).tolist()
        else:
            idx = list(range(k)) + rng.integers(0, k, size=m - k).tolist()
        out.append(TrainExampleGroup(ex.query_text, [ex.positives[i] for i in idx]))
    return out


# ---------------------------------------------------------------------------
# Gradient plumbing: encode with cache, backprop through normalization,
# scatter into the projection gradient
# ---------------------------------------------------------------------------

@dataclass
class _EncCache:
    norm: float
    idx: np.ndarray
    val: np.ndarray
    unit: np.ndarray


def _encode_cached(model: EncoderModel, texts: list[str]) -> tuple[np.ndarray, list[_EncCache]]:
    vecs = np.empty((len(texts), model.embed_dim), dtype=np.float64)
    caches: list[_EncCache] = []
    for i, text in enumerate(texts):
        unit, norm, idx, val = _encode_raw(model, text)
        vecs[i] = unit
        caches.append(_EncCache(norm=norm, idx=idx, val=val, unit=unit))
    return vecs, caches


def _projection_grad(
    grad_buffer: np.ndarray,
    caches: list[_EncCache],
    grads_wrt_unit: np.ndarray,
) -> None:
    """Accumulate d(loss)/d(projection) into grad_buffer.

    Backprops through L2 normalization: dL/dv = (g - (g.e) e) / |v|, then
    scatters val x dv outer products into the touched projection rows.
    Segment-summed after a stable argsort instead of np.add.at, which is
    slow for this access pattern.
    """
    all_idx = np.concatenate([c.idx for c in caches])
    contribs = np.concatenate(
        [
            c.val[:, None]
            * ((g - np.dot(g, c.unit) * c.unit) / c.norm)[None, :]
            for c, g in zip(caches, grads_wrt_unit)
        ]
    )
    order = np.argsort(all_idx, kind="stable")
    sorted_idx = all_idx[order]
    uniq, starts = np.unique(sorted_idx, return_index=True)
    rows = np.add.reduceat(contribs[order], starts, axis=0)
    grad_buffer[uniq] += rows


# ---------------------------------------------------------------------------
# Checkpoints and the training log
# ---------------------------------------------------------------------------

def save_model(model: EncoderModel, path: str) -> None:
    """Write the CPMD checkpoint: magic, version, dims, seed, f32 rows."""
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(
            struct.pack(
                "<IIIQ",
                MODEL_VERSION,
                model.vocab_dim,
                model.embed_dim,
                model.seed & (2**64 - 1),
            )
        )
        fh.write(np.ascontiguousarray(model.projection, dtype="<f4").tobytes())


def load_model(path: str, ngram_range: tuple[int, int] = DEFAULT_NGRAM_RANGE) -> EncoderModel:
    """Read a CPMD checkpoint.

    The file format does not carry the n-gram range; pass it explicitly
    for models trained with a non-default range.
    """
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    header_len = 4 + 4 + 4 + 4 + 8
    if len(blob) < header_len or blob[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a CPMD model file (bad magic)")
    version, vocab_dim, embed_dim, seed_u = struct.unpack("<IIIQ", blob[4:header_len])
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported CPMD version {version}")
    expected = vocab_dim * embed_dim * 4
    if len(blob) != header_len + expected:
        raise FormatError(f"{path}: truncated or oversized projection payload")
    projection = np.frombuffer(blob, dtype="<f4", count=vocab_dim * embed_dim,
                               offset=header_len).reshape(vocab_dim, embed_dim)
    seed = seed_u - 2**64 if seed_u >= 2**63 else seed_u
    return EncoderModel(
        vocab_dim=vocab_dim,
        embed_dim=embed_dim,
        projection=projection.astype(np.float64),
        ngram_range=ngram_range,
        seed=seed,
    )


def write_training_log(history: list[EpochStats], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss)])


def _quantized(projection: np.ndarray) -> np.ndarray:
    return projection.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------

def build_stage1_examples(corpus: Corpus, solutions: list[Solution]) -> list[TrainExampleGroup]:
    """statement -> accepted solution codes, one group per problem."""
    by_problem: dict[str, list[str]] = {}
    for sol in sorted(solutions, key=lambda s: s.id):
        by_problem.setdefault(sol.problem_id, []).append(sol.code)
    examples = []
    skipped = 0
    for pid in sorted(by_problem):
        problem = corpus.get(pid)
        if problem is None:
            skipped += 1
            continue
        examples.append(TrainExampleGroup(problem.statement, by_problem[pid]))
    if skipped:
        logger.warning("%d solution groups had no matching problem", skipped)
    return examples


def _masked_query(policy: MaskingPolicy | None, text: str, epoch: int) -> str:
    if policy is None:
        return text
    derived = replace(policy, seed=_seed_from(policy.seed, "epoch", str(epoch)))
    masked = apply_masking(derived, text)
    # a statement that opens with a heading can mask down to nothing;
    # train on the raw statement in that case
    return masked if masked.strip() else text


def _batch_loss_and_step(
    model: EncoderModel,
    batch_examples: list[TrainExampleGroup],
    cfg: TrainConfig,
    optimizer,
    grad_buffer: np.ndarray,
    epoch: int,
) -> float:
    query_texts = [_masked_query(cfg.masking, ex.query_text, epoch) for ex in batch_examples]
    member_texts = [p for ex in batch_examples for p in ex.positives]
    n, m = len(batch_examples), cfg.group_size

    q_vecs, q_caches = _encode_cached(model, query_texts)
    g_vecs, g_caches = _encode_cached(model, member_texts)
    batch = EncodedBatch(q_vecs, g_vecs.reshape(n, m, -1), validate=False)
    try:
        out = compute_loss(batch, cfg.objective)
    except NumericError as exc:
        raise NumericError(f"epoch {epoch}: {exc}") from exc

    grad_buffer.fill(0.0)
    _projection_grad(grad_buffer, q_caches, out.grad_queries)
    _projection_grad(grad_buffer, g_caches, out.grad_groups.reshape(n * m, -1))
    optimizer.step(model.projection, grad_buffer)
    if not np.all(np.isfinite(model.projection)):
        raise NumericError(f"epoch {epoch}: non-finite parameters after update")
    return out.value


def _eval_groups(
    model: EncoderModel, groups: list[TrainExampleGroup], cfg: TrainConfig
) -> tuple[float, float]:
    """Loss and mean positive cosine on pre-sampled groups, no masking."""
    q_vecs, _ = _encode_cached(model, [g.query_text for g in groups])
    member_texts = [p for g in groups for p in g.positives]
    g_vecs, _ = _encode_cached(model, member_texts)
    g_vecs = g_vecs.reshape(len(groups), cfg.group_size, -1)
    batch = EncodedBatch(q_vecs, g_vecs, validate=False)
    out = compute_loss(batch, cfg.objective)
    pos_cos = float(np.mean(np.einsum("nd,nkd->nk", q_vecs, g_vecs)))
    return out.value, pos_cos


def train_stage1(
    corpus: Corpus, solutions: list[Solution], cfg: TrainConfig
) -> tuple[EncoderModel, list[EpochStats]]:
    """Contrastive problem-code pretraining.

    Splits off a validation fraction of the example groups, trains for
    cfg.epochs, and returns the model snapshot with the lowest validation
    loss (quantized to float32 values) plus the per-epoch history.
    """
    examples = build_stage1_examples(corpus, solutions)
    if not examples:
        raise DataError("empty training dataset")
    if len(examples) < 4:
        raise DataError(f"dataset too small for a validation split: {len(examples)}")

    split_rng = np.random.default_rng(_seed_from(cfg.seed, "stage1-split"))
    perm = split_rng.permutation(len(examples))
    n_val = max(2, int(round(cfg.val_fraction * len(examples))))
    if len(examples) - n_val < 2:
        raise DataError("dataset too small after validation split")
    val_examples = [examples[i] for i in sorted(perm[:n_val].tolist())]
    train_examples = [examples[i] for i in sorted(perm[n_val:].tolist())]

    val_groups = sample_groups(
        val_examples, cfg.group_size, np.random.default_rng(_seed_from(cfg.seed, "val-groups"))
    )

    model = EncoderModel.initialize(cfg.vocab_dim, cfg.embed_dim, cfg.ngram_range, cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)
    grad_buffer = np.zeros_like(model.projection)

    best_val = np.inf
    best_projection = model.projection.copy()
    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        epoch_rng = np.random.default_rng(_seed_from(cfg.seed, "stage1-epoch", str(epoch)))
        order = epoch_rng.permutation(len(train_examples)).tolist()
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_examples[i] for i in order[start : start + cfg.batch_size]]
            if len(chunk) < 2:
                continue  # a trailing singleton cannot form a contrastive batch
            batch = sample_groups(chunk, cfg.group_size, epoch_rng)
            batch_losses.append(
                _batch_loss_and_step(model, batch, cfg, optimizer, grad_buffer, epoch)
            )
        if not batch_losses:
            raise DataError("no trainable batches (batch_size too large?)")
        val_loss, pos_cos = _eval_groups(model, val_groups, cfg)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(batch_losses)),
                val_loss=val_loss,
                val_positive_cosine=pos_cos,
            )
        )
        if val_loss < best_val:
            best_val = val_loss
            best_projection = model.projection.copy()

    final = EncoderModel(
        vocab_dim=cfg.vocab_dim,
        embed_dim=cfg.embed_dim,
        projection=_quantized(best_projection),
        ngram_range=cfg.ngram_range,
        seed=cfg.seed,
    )
    if cfg.log_path:
        write_training_log(history, cfg.log_path)
    return final, history


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def build_stage2_triplets(
    corpus: Corpus,
    dup_pairs: list[DuplicatePair],
    simplified_pairs: list[SimplifiedPair],
    mined_negatives: list[MinedTriplet],
) -> tuple[list[TripletExample], list[TripletExample]]:
    """Resolve ids to texts; returns (duplicate task, simplified task)."""
    neg_of: dict[tuple[str, str], str] = {}
    for rec in mined_negatives:
        if rec.verdict == "accepted":
            neg_of.setdefault((rec.anchor, rec.positive), rec.negative)

    def statement(pid: str) -> str:
        problem = corpus.get(pid)
        if problem is None:
            raise DataError(f"unknown problem id {pid!r} in stage-2 pairs")
        return problem.statement

    def lookup_negative(a: str, b: str) -> str | None:
        return neg_of.get((a, b)) or neg_of.get((b, a))

    dup_triplets: list[TripletExample] = []
    for pair in dup_pairs:
        neg = lookup_negative(pair.problem_a, pair.problem_b)
        if neg is None:
            continue
        dup_triplets.append(
            TripletExample(
                anchor=statement(pair.problem_a),
                positive=statement(pair.problem_b),
                negative=statement(neg),
            )
        )
    simp_triplets: list[TripletExample] = []
    for pair in simplified_pairs:
        neg = lookup_negative(pair.simplified_id, pair.full_id)
        if neg is None:
            continue
        simp_triplets.append(
            TripletExample(
                anchor=statement(pair.simplified_id),
                positive=statement(pair.full_id),
                negative=statement(neg),
            )
        )
    return dup_triplets, simp_triplets


def balance_and_interleave(
    task_lists: list[list[TripletExample]], cap: int, seed: int
) -> list[TripletExample]:
    """Downsample each task to <= cap, then interleave round-robin."""
    rng = np.random.default_rng(_seed_from(seed, "stage2-cap"))
    capped: list[list[TripletExample]] = []
    for triplets in task_lists:
        if len(triplets) > cap:
            keep = sorted(rng.choice(len(triplets), size=cap, replace=False).tolist())
            triplets = [triplets[i] for i in keep]
        capped.append(triplets)
    mixture: list[TripletExample] = []
    longest = max((len(t) for t in capped), default=0)
    for i in range(longest):
        for triplets in capped:
            if i < len(triplets):
                mixture.append(triplets[i])
    return mixture


def train_stage2(
    model: EncoderModel,
    corpus: Corpus,
    dup_pairs: list[DuplicatePair],
    simplified_pairs: list[SimplifiedPair],
    mined_negatives: list[MinedTriplet],
    cfg: TrainConfig,
) -> tuple[EncoderModel, list[EpochStats]]:
    """Triplet fine-tuning on a balanced two-task mixture.

    Without a validation split the val_loss column repeats a post-epoch
    evaluation pass over the whole mixture.
    """
    if cfg.objective.objective != "triplet":
        raise ValueError("stage 2 trains with the triplet objective")
    dup_triplets, simp_triplets = build_stage2_triplets(
        corpus, dup_pairs, simplified_pairs, mined_negatives
    )
    mixture = balance_and_interleave([dup_triplets, simp_triplets], cfg.task_cap, cfg.seed)
    return train_stage2_triplets(model, mixture, cfg)


def train_stage2_triplets(
    model: EncoderModel, mixture: list[TripletExample], cfg: TrainConfig
) -> tuple[EncoderModel, list[EpochStats]]:
    """Fine-tune on an explicit triplet sequence (already balanced)."""
    if not mixture:
        raise DataError("empty triplet set")
    work = EncoderModel(
        vocab_dim=model.vocab_dim,
        embed_dim=model.embed_dim,
        projection=model.projection.copy(),
        ngram_range=model.ngram_range,
        seed=model.seed,
    )
    optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)
    grad_buffer = np.zeros_like(work.projection)

    def eval_loss() -> float:
        a, _ = _encode_cached(work, [t.anchor for t in mixture])
        p, _ = _encode_cached(work, [t.positive for t in mixture])
        ng, _ = _encode_cached(work, [t.negative for t in mixture])
        return triplet_margin(a, p, ng, cfg.objective).value

    history: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        batch_losses = []
        for start in range(0, len(mixture), cfg.batch_size):
            chunk = mixture[start : start + cfg.batch_size]
            a_vecs, a_caches = _encode_cached(work, [t.anchor for t in chunk])
            p_vecs, p_caches = _encode_cached(work, [t.positive for t in chunk])
            n_vecs, n_caches = _encode_cached(work, [t.negative for t in chunk])
            out = triplet_margin(a_vecs, p_vecs, n_vecs, cfg.objective)
            grad_buffer.fill(0.0)
            _projection_grad(grad_buffer, a_caches, out.grad_queries)
            _projection_grad(grad_buffer, p_caches, out.grad_groups[:, 0, :])
            _projection_grad(grad_buffer, n_caches, out.grad_groups[:, 1, :])
            optimizer.step(work.projection, grad_buffer)
            if not np.all(np.isfinite(work.projection)):
                raise NumericError(f"epoch {epoch}: non-finite parameters after update")
            batch_losses.append(out.value)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(batch_losses)),
                val_loss=eval_loss(),
            )
        )

    final = EncoderModel(
        vocab_dim=work.vocab_dim,
        embed_dim=work.embed_dim,
        projection=_quantized(work.projection),
        ngram_range=work.ngram_range,
        seed=work.seed,
    )
    if cfg.log_path:
        write_training_log(history, cfg.log_path)
    return final, history
