"""Unit-norm dense embeddings for statements and code.

Two sources of vectors:

* a small trainable encoder: signed character n-gram feature hashing into
  ``vocab_dim`` buckets followed by a linear projection to ``embed_dim``
  and L2 normalization (differentiable, language-agnostic, fast);
* import of externally computed vectors from the ``CPRE`` binary format.

The module also implements the statement-masking augmentation: labeled
I/O-format, sample and constraint blocks are independently dropped with
configured probabilities while the narrative is always kept.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from hashlib import blake2b
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError

EMBEDDING_MAGIC = b"CPRE"
EMBEDDING_VERSION = 1

DEFAULT_VOCAB_DIM = 2**18
DEFAULT_EMBED_DIM = 128
DEFAULT_NGRAM_RANGE = (2, 4)


def _stable_hash64(data: bytes) -> int:
    return int.from_bytes(blake2b(data, digest_size=8).digest(), "little")


def _seed_from(seed: int, *parts: str) -> int:
    """Derive a 64-bit stream seed from a base seed and string parts."""
    h = blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=True))
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


class _Featurizer:
    """Cached signed hashing of character n-grams into vocab buckets."""

    def __init__(self, ngram_range: tuple[int, int], vocab_dim: int):
        self.ngram_range = ngram_range
        self.vocab_dim = vocab_dim
        self._gram_cache: dict[str, tuple[int, float]] = {}
        self._text_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def _gram(self, gram: str) -> tuple[int, float]:
        hit = self._gram_cache.get(gram)
        if hit is None:
            h = _stable_hash64(gram.encode("utf-8"))
            hit = ((h >> 1) % self.vocab_dim, 1.0 if h & 1 else -1.0)
            self._gram_cache[gram] = hit
        return hit

    def features(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """Return (bucket indices, signed counts) for one text."""
        cached = self._text_cache.get(text)
        if cached is not None:
            return cached
        lo, hi = self.ngram_range
        counts: dict[int, float] = {}
        grams = 0
        for n in range(lo, hi + 1):
            for i in range(len(text) - n + 1):
                bucket, sign = self._gram(text[i : i + n])
                counts[bucket] = counts.get(bucket, 0.0) + sign
                grams += 1
        if grams == 0:
            # text shorter than the smallest n-gram: hash it whole
            bucket, sign = self._gram(text)
            counts[bucket] = sign
        idx = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
        val = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
        order = np.argsort(idx)
        out = (idx[order], val[order])
        self._text_cache[text] = out
        return out


@dataclass
class EncoderModel:
    """Feature-hashing encoder with a trainable linear projection.

    The projection is held in float64; checkpoints store float32, so a
    trained model is quantized to float32-representable values before it
    is returned (see trainer), making save/load round trips bit-exact.
    """

    vocab_dim: int
    embed_dim: int
    projection: np.ndarray
    ngram_range: tuple[int, int] = DEFAULT_NGRAM_RANGE
    seed: int = 0
    _featurizer: _Featurizer | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.projection.shape != (self.vocab_dim, self.embed_dim):
            raise ValueError(
                f"projection shape {self.projection.shape} != "
                f"({self.vocab_dim}, {self.embed_dim})"
            )
        if not np.all(np.isfinite(self.projection)):
            raise ValueError("projection contains non-finite entries")

    @classmethod
    def initialize(
        cls,
        vocab_dim: int = DEFAULT_VOCAB_DIM,
        embed_dim: int = DEFAULT_EMBED_DIM,
        ngram_range: tuple[int, int] = DEFAULT_NGRAM_RANGE,
        seed: int = 0,
    ) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        projection = rng.standard_normal((vocab_dim, embed_dim)) / np.sqrt(embed_dim)
        return cls(
            vocab_dim=vocab_dim,
            embed_dim=embed_dim,
            projection=projection,
            ngram_range=ngram_range,
            seed=seed,
        )

    @property
    def featurizer(self) -> _Featurizer:
        if self._featurizer is None:
            self._featurizer = _Featurizer(self.ngram_range, self.vocab_dim)
        return self._featurizer


def _encode_raw(model: EncoderModel, text: str) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Encode and also return the pre-normalization norm and sparse features.

    Used by the trainer to backpropagate through the normalization.
    """
    if not text:
        raise ValueError("cannot encode empty text")
    idx, val = model.featurizer.features(text)
    v = val @ model.projection[idx]
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("text maps to a non-normalizable vector")
    return v / norm, norm, idx, val


def encode(model: EncoderModel, text: str) -> np.ndarray:
    """Embed one text as a float64 unit vector of length embed_dim."""
    return _encode_raw(model, text)[0]


def encode_texts(model: EncoderModel, texts: Sequence[str]) -> np.ndarray:
    """Embed several texts into an (n, embed_dim) float64 array."""
    out = np.empty((len(texts), model.embed_dim), dtype=np.float64)
    for i, text in enumerate(texts):
        out[i] = encode(model, text)
    return out


# ---------------------------------------------------------------------------
# Statement masking
# ---------------------------------------------------------------------------

@dataclass
class MaskingPolicy:
    """Per-section-kind drop probabilities for statement augmentation."""

    mask_io_format: float = 0.5
    mask_samples: float = 0.5
    mask_constraints: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("mask_io_format", "mask_samples", "mask_constraints"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


# Heading tokens checked in priority order: sample markers first because
# "Sample Input" must not be classified as an I/O-format block.
_SAMPLE_TOKENS = ("sample", "example", "样例", "示例", "入力例", "出力例")
_CONSTRAINT_TOKENS = ("constraint", "数据范围", "约束", "制約", "限制")
_IO_TOKENS = ("input", "output", "输入", "输出", "入力", "出力")
_MAX_HEADING_LEN = 40


def _heading_kind(line: str) -> str | None:
    s = line.strip().lstrip("#*=>- \t").rstrip(":： \t").lower()
    if not s or len(s) > _MAX_HEADING_LEN:
        return None
    for token in _SAMPLE_TOKENS:
        if s.startswith(token):
            return "samples"
    for token in _CONSTRAINT_TOKENS:
        if s.startswith(token):
            return "constraints"
    for token in _IO_TOKENS:
        if s.startswith(token):
            return "io_format"
    return None


def split_sections(statement: str) -> list[tuple[str | None, list[str]]]:
    """Split statement lines into (kind, lines) blocks.

    kind is None for narrative text (everything before the first detected
    heading), else one of "io_format", "samples", "constraints". A block
    runs from its heading line to the next heading.
    """
    lines = statement.split("\n")
    blocks: list[tuple[str | None, list[str]]] = []
    current_kind: str | None = None
    current: list[str] = []
    for line in lines:
        kind = _heading_kind(line)
        if kind is not None:
            if current:
                blocks.append((current_kind, current))
            current_kind = kind
            current = [line]
        else:
            current.append(line)
    if current:
        blocks.append((current_kind, current))
    return blocks


def apply_masking(policy: MaskingPolicy, statement: str) -> str:
    """Randomly drop detected non-essential blocks of a statement.

    Deterministic in (policy.seed, statement): the same statement always
    receives the same mask under a given policy. Every surviving line is a
    line of the input, and narrative lines always survive.
    """
    if not statement:
        raise ValueError("cannot mask an empty statement")
    blocks = split_sections(statement)
    probs = {
        "io_format": policy.mask_io_format,
        "samples": policy.mask_samples,
        "constraints": policy.mask_constraints,
    }
    rng = np.random.default_rng(_seed_from(policy.seed, statement))
    kept: list[str] = []
    for kind, lines in blocks:
        if kind is not None and rng.uniform() < probs[kind]:
            continue
        kept.extend(lines)
    return "\n".join(kept)


# ---------------------------------------------------------------------------
# Embedding matrices and the CPRE file format
# ---------------------------------------------------------------------------

class EmbeddingMatrix:
    """Unit-norm float32 row vectors, one per id, in a fixed order."""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, normalize: bool = True):
        ids = list(ids)
        vectors = np.asarray(vectors)
        if vectors.ndim != 2:
            raise ValueError("vectors must be a 2-d array")
        if len(ids) != vectors.shape[0]:
            raise DataError(
                f"id count {len(ids)} != row count {vectors.shape[0]}"
            )
        if len(set(ids)) != len(ids):
            raise DataError("ids are not unique")
        if vectors.shape[1] == 0:
            raise FormatError("embedding dimension is zero")
        if normalize:
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            bad = np.flatnonzero((norms == 0.0) | ~np.isfinite(norms))
            if bad.size:
                raise FormatError(
                    f"non-normalizable row for id {ids[int(bad[0])]!r}"
                )
            vectors = (vectors.astype(np.float64) / norms[:, None]).astype(np.float32)
        else:
            vectors = vectors.astype(np.float32)
        self.ids = ids
        self.vectors = vectors
        self._row_of = {doc_id: i for i, doc_id in enumerate(ids)}

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, doc_id: str) -> int:
        return self._row_of[doc_id]

    def vector(self, doc_id: str) -> np.ndarray:
        return self.vectors[self._row_of[doc_id]]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._row_of


def embed_texts(model: EncoderModel, ids: Sequence[str], texts: Sequence[str]) -> EmbeddingMatrix:
    """Encode texts with the model into an EmbeddingMatrix."""
    if len(ids) != len(texts):
        raise ValueError("ids and texts differ in length")
    return EmbeddingMatrix(ids, encode_texts(model, texts))


def write_embeddings(matrix: EmbeddingMatrix, path: str) -> None:
    """Write the CPRE binary format.

    Header: magic "CPRE", u32 version=1, u32 dim, u64 count; then
    count x dim little-endian float32 rows; then count LF-terminated
    UTF-8 ids.
    """
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<IIQ", EMBEDDING_VERSION, matrix.dim, len(matrix)))
        fh.write(np.ascontiguousarray(matrix.vectors, dtype="<f4").tobytes())
        for doc_id in matrix.ids:
            fh.write(doc_id.encode("utf-8"))
            fh.write(b"\n")


def read_embeddings(path: str) -> EmbeddingMatrix:
    """Read a CPRE file; rows are re-normalized to unit norm on load."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    header_len = 4 + 4 + 4 + 8
    if len(blob) < header_len or blob[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: not a CPRE embedding file (bad magic)")
    version, dim, count = struct.unpack("<IIQ", blob[4:header_len])
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported CPRE version {version}")
    if dim == 0:
        raise FormatError(f"{path}: embedding dimension is zero")
    vec_bytes = dim * count * 4
    if len(blob) < header_len + vec_bytes:
        raise FormatError(f"{path}: truncated vector payload")
    vectors = np.frombuffer(
        blob, dtype="<f4", count=dim * count, offset=header_len
    ).reshape(count, dim)
    tail = blob[header_len + vec_bytes :]
    ids = tail.decode("utf-8").split("\n")
    if ids and ids[-1] == "":
        ids.pop()
    else:
        raise FormatError(f"{path}: id block is not LF-terminated")
    if len(ids) != count:
        raise FormatError(f"{path}: id count {len(ids)} != header count {count}")
    return EmbeddingMatrix(ids, vectors.copy(), normalize=True)


def import_embeddings(path: str) -> EmbeddingMatrix:
    """Alias for read_embeddings: the external-vector import entry point."""
    return read_embeddings(path)
