"""Synthetic embedding datasets, few-shot splits and CSV interchange.

Embeddings CSV::

    #classes: name0,name1,...
    label,f0,f1,...,f{d-1}
    0,0.12...,...

Predictions CSV::

    label,predicted,confidence[,p0,...,p{K-1}]

Floats are written with 17 significant digits so they round-trip exactly.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, EmptyInputError, ParameterError, ParseError
from .metrics import ConfidenceRecord
from .model import PredictionBatch, class_directions
from .seeding import fnv1a64_hex, rng_for

UNIT_TOL = 1e-9
RENORM_TOL = 1e-6
ROWSUM_TOL = 1e-6


def fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    feature_dim: int = 64
    overlap: float = 0.5
    train_per_class: int = 32
    test_per_class: int = 200
    noise_sigma: float = 0.6
    seed: int = 0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ParameterError("K ≥ 2 required")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ParameterError("per-class counts must be >= 1")
        if not 0.0 <= self.overlap < 1.0:
            raise ParameterError("overlap must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise ParameterError("need one class name per class")

    def names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class{i}" for i in range(self.n_classes)]


@dataclass
class EmbeddingDataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    provenance: dict = field(default_factory=dict)
    renormalized: bool = False

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class FewShotSplit:
    train_indices: np.ndarray  # (K, shots)
    test_indices: np.ndarray
    shots: int
    seed: int

    @property
    def train(self) -> np.ndarray:
        return self.train_indices.reshape(-1)


def class_means(spec: SyntheticSpec) -> np.ndarray:
    g, e = class_directions(spec.seed, spec.n_classes, spec.feature_dim)
    return math.sqrt(spec.overlap) * g[None, :] + math.sqrt(1.0 - spec.overlap) * e


def generate(spec: SyntheticSpec) -> EmbeddingDataset:
    """Samples ``normalize(mu_y + sigma * eps)``, grouped by class.

    Class means are ``sqrt(rho) g + sqrt(1 - rho) e_c`` with orthonormal
    ``g, e_1..e_K``, so every pair of means has cosine exactly ``rho``.
    Each class gets ``train_per_class + test_per_class`` samples.
    """
    K, d = spec.n_classes, spec.feature_dim
    if K > d - 1:
        raise DimensionError(f"K={K} needs feature_dim >= K+1, got {d}")
    mu = class_means(spec)
    per_class = spec.train_per_class + spec.test_per_class
    labels = np.repeat(np.arange(K), per_class)
    rng = rng_for(spec.seed, "samples")
    noise = rng.standard_normal((labels.size, d))
    raw = mu[labels] + spec.noise_sigma * noise
    feats = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    prov = {"source": "synthetic", **{k: v for k, v in spec.__dict__.items() if k != "class_names"}}
    return EmbeddingDataset(feats, labels.astype(np.int64), spec.names(), prov)


def few_shot_split(ds: EmbeddingDataset, shots: int, seed: int) -> FewShotSplit:
    if shots < 1:
        raise ParameterError("shots must be >= 1")
    rng = rng_for(seed, "split")
    train = []
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size < shots:
            raise DataError(f"class {c} has {members.size} samples, need {shots}")
        train.append(np.sort(rng.choice(members, size=shots, replace=False)))
    train_idx = np.vstack(train).astype(np.int64)
    mask = np.ones(len(ds), dtype=bool)
    mask[train_idx.reshape(-1)] = False
    return FewShotSplit(train_idx, np.flatnonzero(mask).astype(np.int64), shots, seed)


# ----------------------------------------------------------------------------
# Embeddings CSV
# ----------------------------------------------------------------------------


def format_embeddings(ds: EmbeddingDataset) -> str:
    lines = ["#classes: " + ",".join(ds.class_names)]
    lines.append("label," + ",".join(f"f{j}" for j in range(ds.feature_dim)))
    for y, row in zip(ds.labels, ds.features):
        lines.append(str(int(y)) + "," + ",".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def save_embeddings(ds: EmbeddingDataset, path) -> None:
    Path(path).write_bytes(format_embeddings(ds).encode("utf-8"))


def _parse_float(tok: str, line: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", line) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {tok!r}", line)
    return v


def _parse_int(tok: str, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"not an integer label: {tok!r}", line) from None


def load_embeddings(path) -> EmbeddingDataset:
    raw = Path(path).read_bytes()
    text = raw.decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("#classes:"):
        raise ParseError("first line must be '#classes: name0,name1,...'", 1)
    names = [n.strip() for n in lines[0][len("#classes:"):].split(",")]
    if len(names) < 2 or any(not n for n in names):
        raise ParseError("need at least two non-empty class names", 1)
    if len(lines) < 2:
        raise ParseError("missing column header", 2)
    header = [h.strip() for h in lines[1].split(",")]
    d = len(header) - 1
    if header[0] != "label" or d < 1 or header[1:] != [f"f{j}" for j in range(d)]:
        raise ParseError("header must be 'label,f0,f1,...'", 2)
    body = lines[2:]
    if not body:
        raise EmptyInputError(f"{path}: no data rows")
    feats = np.empty((len(body), d))
    labels = np.empty(len(body), dtype=np.int64)
    for i, ln in enumerate(body):
        lineno = i + 3
        toks = ln.split(",")
        if len(toks) != d + 1:
            raise ParseError(f"expected {d + 1} fields, got {len(toks)}", lineno)
        y = _parse_int(toks[0], lineno)
        if not 0 <= y < len(names):
            raise ParseError(f"unknown label {y}", lineno)
        labels[i] = y
        feats[i] = [_parse_float(t, lineno) for t in toks[1:]]
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0):
        raise ParseError("zero feature row", int(np.flatnonzero(norms == 0)[0]) + 3)
    renorm = bool(np.any(np.abs(norms - 1.0) > RENORM_TOL))
    if renorm:
        warnings.warn(f"{path}: feature rows re-normalized to unit length", stacklevel=2)
    # tighten rows inside the tolerance band too so the unit-norm invariant holds
    if renorm or np.any(np.abs(norms - 1.0) > UNIT_TOL):
        feats = feats / norms[:, None]
    prov = {"source": "file", "path": str(path), "checksum": fnv1a64_hex(raw)}
    return EmbeddingDataset(feats, labels, names, prov, renormalized=renorm)


# ----------------------------------------------------------------------------
# Predictions CSV
# ----------------------------------------------------------------------------


def format_predictions(batch: PredictionBatch, include_probs: bool = True) -> str:
    K = batch.probs.shape[1]
    cols = ["label", "predicted", "confidence"]
    if include_probs:
        cols += [f"p{k}" for k in range(K)]
    out = io.StringIO()
    out.write(",".join(cols) + "\n")
    labels = batch.labels if batch.labels is not None else np.full(batch.predicted.size, -1)
    for n in range(batch.predicted.size):
        row = [str(int(labels[n])), str(int(batch.predicted[n])), fmt(batch.confidence[n])]
        if include_probs:
            row += [fmt(p) for p in batch.probs[n]]
        out.write(",".join(row) + "\n")
    return out.getvalue()


def save_predictions(batch: PredictionBatch, path, include_probs: bool = True) -> None:
    Path(path).write_bytes(format_predictions(batch, include_probs).encode("utf-8"))


@dataclass
class PredictionFile:
    labels: np.ndarray
    predicted: np.ndarray
    confidence: np.ndarray
    probs: np.ndarray | None = None

    @property
    def correct(self) -> np.ndarray:
        return self.labels == self.predicted

    def records(self) -> list[ConfidenceRecord]:
        return [ConfidenceRecord(float(c), bool(k)) for c, k in zip(self.confidence, self.correct)]


def load_prediction_records(path) -> PredictionFile:
    text = Path(path).read_bytes().decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise EmptyInputError(f"{path}: empty predictions file")
    header = [h.strip() for h in lines[0].split(",")]
    if header[:3] != ["label", "predicted", "confidence"]:
        raise ParseError("header must start with 'label,predicted,confidence'", 1)
    K = len(header) - 3
    if K and header[3:] != [f"p{k}" for k in range(K)]:
        raise ParseError("probability columns must be named p0..p{K-1}", 1)
    body = lines[1:]
    if not body:
        raise EmptyInputError(f"{path}: no prediction rows")
    n = len(body)
    labels = np.empty(n, dtype=np.int64)
    predicted = np.empty(n, dtype=np.int64)
    conf = np.empty(n)
    probs = np.empty((n, K)) if K else None
    for i, ln in enumerate(body):
        lineno = i + 2
        toks = ln.split(",")
        if len(toks) != K + 3:
            raise ParseError(f"expected {K + 3} fields, got {len(toks)}", lineno)
        labels[i] = _parse_int(toks[0], lineno)
        predicted[i] = _parse_int(toks[1], lineno)
        c = _parse_float(toks[2], lineno)
        if not 0.0 <= c <= 1.0:
            raise ParseError(f"confidence {c} outside [0, 1]", lineno)
        conf[i] = c
        if K:
            row = [_parse_float(t, lineno) for t in toks[3:]]
            if abs(math.fsum(row) - 1.0) > ROWSUM_TOL:
                raise ParseError(f"probabilities sum to {math.fsum(row)!r}, not 1", lineno)
            if not (0 <= predicted[i] < K and 0 <= labels[i] < K):
                raise ParseError(f"label or prediction outside [0, {K})", lineno)
            probs[i] = row
    return PredictionFile(labels, predicted, conf, probs)
