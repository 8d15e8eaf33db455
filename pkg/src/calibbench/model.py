"""Frozen synthetic vision-language classifier with learnable prompt tokens.

Text features are produced by a stand-in encoder: the M prompt tokens of each
class are mean-pooled, the class anchor is added, a fixed linear map takes the
result to feature space, and rows are L2-normalized. Images are represented
directly by unit feature vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import DimensionError, ParameterError, PreconditionError
from .gradcore import Parameter
from .seeding import rng_for

INIT_STD = 0.02
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class ClassifierConfig:
    n_classes: int
    context_length: int = 16
    token_dim: int = 32
    feature_dim: int = 64
    tau: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.n_classes < 2:
            raise ParameterError("K ≥ 2 required")
        if self.context_length < 1:
            raise ParameterError("context length M >= 1 required")
        if self.token_dim < 1 or self.feature_dim < 1:
            raise ParameterError("dimensions must be positive")


class PromptBank:
    """Learnable tokens, stored as a ``(K*M, d_tok)`` parameter.

    Rows ``i*M .. i*M + M - 1`` are the context tokens of class ``i``.
    """

    def __init__(self, tokens, n_classes: int, context_length: int):
        self.tokens = tokens if isinstance(tokens, Parameter) else Parameter(tokens)
        self.n_classes = int(n_classes)
        self.context_length = int(context_length)
        rows, _ = self.tokens.shape
        if rows != self.n_classes * self.context_length:
            raise DimensionError(
                f"token rows {rows} != K*M = {self.n_classes * self.context_length}"
            )
        if not np.all(np.isfinite(self.tokens.value)):
            raise ParameterError("prompt tokens must be finite")

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]

    def copy(self) -> "PromptBank":
        return PromptBank(self.tokens.value.copy(), self.n_classes, self.context_length)

    def pooling_matrix(self) -> np.ndarray:
        """``(K, K*M)`` matrix averaging each class's tokens."""
        K, M = self.n_classes, self.context_length
        pool = np.zeros((K, K * M))
        for i in range(K):
            pool[i, i * M:(i + 1) * M] = 1.0 / M
        return pool


def init_prompts(cfg: ClassifierConfig) -> PromptBank:
    rng = rng_for(cfg.seed, "prompts")
    K, M = cfg.n_classes, cfg.context_length
    tokens = rng.normal(0.0, INIT_STD, size=(K * M, cfg.token_dim))
    return PromptBank(tokens, K, M)


def _orthonormal_directions(seed: int, n_classes: int, dim: int, label: str):
    """``(K+1, dim)`` orthonormal rows: a shared direction then one per class."""
    if n_classes > dim - 1:
        raise DimensionError(
            f"need K <= d_feat - 1 orthogonal directions (K={n_classes}, d_feat={dim})"
        )
    rng = rng_for(seed, label)
    q, r = np.linalg.qr(rng.standard_normal((dim, n_classes + 1)))
    q = q * np.sign(np.diag(r))  # unique QR so the basis depends only on the draw
    return np.ascontiguousarray(q.T)


def class_directions(seed: int, n_classes: int, dim: int):
    """Shared unit direction ``g`` and per-class orthonormal ``e`` (K, dim).

    The synthetic data generator and the matched encoder both call this, which
    is what lets an encoder built from the same seed "know" the class layout.
    """
    q = _orthonormal_directions(seed, n_classes, dim, "class-directions")
    return q[0], q[1:]


class FrozenEncoder:
    """Fixed projection ``(d_tok, d_feat)`` and class anchors ``(K, d_tok)``.

    With ``matched=True`` the projection's row space contains the shared and
    per-class directions used by :func:`calibbench.data.generate` for the same
    seed. Anchor ``i`` maps to
    ``sqrt(r) g + sqrt(1-r) (a e_i + sqrt(1-a^2) n_i)`` with ``r = anchor_overlap``,
    ``a = anchor_alignment`` and ``n_i`` unit directions unrelated to the data,
    so zero-shot predictions are informative but leave room for tuning.
    Otherwise projection and anchors are random.
    """

    def __init__(
        self,
        seed: int,
        n_classes: int,
        context_length: int,
        token_dim: int = 32,
        feature_dim: int = 64,
        matched: bool = True,
        anchor_overlap: float = 0.5,
        anchor_alignment: float = 0.5,
    ):
        self.seed = int(seed)
        self.n_classes = int(n_classes)
        self.context_length = int(context_length)
        self.token_dim = int(token_dim)
        self.feature_dim = int(feature_dim)
        self.matched = bool(matched)
        self.anchor_overlap = float(anchor_overlap)
        self.anchor_alignment = float(anchor_alignment)
        if not 0.0 <= self.anchor_overlap < 1.0:
            raise ParameterError("anchor_overlap must lie in [0, 1)")
        if not 0.0 <= self.anchor_alignment <= 1.0:
            raise ParameterError("anchor_alignment must lie in [0, 1]")
        K, dt, df = self.n_classes, self.token_dim, self.feature_dim
        if dt > df:
            raise DimensionError("token_dim must not exceed feature_dim")

        if matched:
            if 2 * K + 1 > dt:
                raise DimensionError(f"matched encoder needs token_dim >= 2K+1 (K={K})")
            g, e = class_directions(self.seed, K, df)
            rest = _complement_rows(np.vstack([g, e]), dt - K - 1, self.seed)
            basis = np.vstack([g, e, rest])  # (dt, df), orthonormal rows
            mix = _random_orthogonal(rng_for(self.seed, "encoder-mix"), dt)
            projection = mix @ basis
            coef = np.zeros((K, dt))
            coef[:, 0] = np.sqrt(self.anchor_overlap)
            a = self.anchor_alignment
            coef[np.arange(K), 1 + np.arange(K)] = np.sqrt(1.0 - self.anchor_overlap) * a
            # the misaligned part points along unrelated basis rows
            coef[np.arange(K), 1 + K + np.arange(K)] = (
                np.sqrt(1.0 - self.anchor_overlap) * np.sqrt(1.0 - a * a)
            )
            # anchor @ projection == coef @ basis because mix is orthogonal
            anchors = coef @ mix.T
        else:
            rng = rng_for(self.seed, "encoder-random")
            projection = rng.standard_normal((dt, df)) / np.sqrt(df)
            anchors = rng.standard_normal((K, dt)) / np.sqrt(dt)

        self.projection = _readonly(projection)
        self.anchors = _readonly(anchors)

    @classmethod
    def for_config(cls, cfg: ClassifierConfig, matched: bool = True) -> "FrozenEncoder":
        return cls(
            cfg.seed, cfg.n_classes, cfg.context_length, cfg.token_dim, cfg.feature_dim,
            matched=matched,
        )

    @classmethod
    def from_arrays(cls, projection, anchors, context_length: int, seed: int = 0):
        """Encoder with explicit matrices (not reconstructible from a seed)."""
        enc = cls.__new__(cls)
        enc.projection = _readonly(projection)
        enc.anchors = _readonly(anchors)
        enc.seed = int(seed)
        enc.n_classes, enc.token_dim = enc.anchors.shape
        enc.feature_dim = enc.projection.shape[1]
        enc.context_length = int(context_length)
        enc.matched = False
        enc.anchor_overlap = 0.0
        enc.anchor_alignment = 0.0
        if enc.projection.shape[0] != enc.token_dim:
            raise DimensionError("projection rows must equal anchor width")
        return enc

    def fingerprint(self) -> bytes:
        return self.projection.tobytes() + self.anchors.tobytes()


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64).copy()
    a.flags.writeable = False
    return a


def _random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _complement_rows(rows: np.ndarray, count: int, seed: int) -> np.ndarray:
    """``count`` orthonormal rows orthogonal to the orthonormal ``rows``."""
    if count <= 0:
        return np.zeros((0, rows.shape[1]))
    rng = rng_for(seed, "encoder-complement")
    x = rng.standard_normal((count, rows.shape[1]))
    x = x - (x @ rows.T) @ rows
    q, r = np.linalg.qr(x.T)
    return np.ascontiguousarray((q * np.sign(np.diag(r))).T)


def encode_text(bank, enc: FrozenEncoder):
    """Unit text features ``(K, d_feat)``.

    ``bank`` may be a :class:`PromptBank`, or the token matrix itself as an
    array or taped Var (then shapes are taken from ``enc``).
    """
    if isinstance(bank, PromptBank):
        tokens = bank.tokens.value
        pool = bank.pooling_matrix()
        if bank.n_classes != enc.n_classes or bank.token_dim != enc.token_dim:
            raise DimensionError("prompt bank does not match encoder dimensions")
    else:
        tokens = bank
        K = enc.n_classes
        rows = gc.value_of(tokens).shape[0]
        if rows % K:
            raise DimensionError(f"token rows {rows} not divisible by K={K}")
        pool = PromptBank(np.zeros((rows, 1)), K, rows // K).pooling_matrix()
    pooled = gc.matmul(pool, tokens)
    return gc.row_l2_normalize(gc.matmul(gc.add(pooled, enc.anchors), enc.projection))


@dataclass
class PredictionBatch:
    logits: np.ndarray
    probs: np.ndarray
    confidence: np.ndarray
    predicted: np.ndarray
    labels: np.ndarray | None = None

    @property
    def correct(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("batch has no labels")
        return self.predicted == self.labels

    @classmethod
    def from_probs(cls, logits, probs, labels=None) -> "PredictionBatch":
        probs = np.asarray(probs, dtype=np.float64)
        predicted = np.argmax(probs, axis=1)
        confidence = probs[np.arange(probs.shape[0]), predicted]
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
        return cls(np.asarray(logits, dtype=np.float64), probs, confidence, predicted, labels)


def _check_unit_rows(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise PreconditionError(f"{what} rows must be unit-norm within {UNIT_TOL}")


def classify(image_features, text_features, tau: float, labels=None) -> PredictionBatch:
    v = gc.as_matrix(image_features)
    u = gc.as_matrix(text_features)
    if v.shape[1] != u.shape[1]:
        raise DimensionError(f"feature dims differ: {v.shape[1]} vs {u.shape[1]}")
    _check_unit_rows(v, "image feature")
    _check_unit_rows(u, "text feature")
    logits = v @ u.T
    probs = gc.softmax_rows(logits, tau)
    return PredictionBatch.from_probs(logits, probs, labels)


def text_similarity_stats(text_features) -> dict:
    z = gc.as_matrix(text_features)
    K = z.shape[0]
    if K < 2:
        raise ParameterError("K >= 2 required for off-diagonal statistics")
    s = z @ z.T
    off = ~np.eye(K, dtype=bool)
    return {
        "mean_offdiag": float(s[off].sum() / (K * (K - 1))),
        "max_offdiag": float(s[off].max()),
        "matrix": s,
    }
