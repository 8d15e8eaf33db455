"""Calibration metrics, reliability data, verdicts and temperature scaling.

Metric functions take parallel arrays ``confidence`` (floats in [0, 1]) and
``correct`` (booleans) and return fractions in [0, 1];
:class:`CalibrationReport` converts to percentages.

Equal-width bin ``b`` of ``B`` covers ``(b/B, (b+1)/B]``; a confidence of
exactly 0 goes into the first bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import EmptyInputError, ParameterError
from .gradcore import softmax_rows

N_BINS = 10
VERDICT_TOLERANCE = 1.0

OVERCONFIDENT = "Overconfident"
UNDERCONFIDENT = "Underconfident"
CALIBRATED = "Calibrated"


class ConfidenceRecord(NamedTuple):
    confidence: float
    correct: bool


def records_to_arrays(records):
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    corr = np.array([bool(r.correct) for r in records], dtype=bool)
    return conf, corr


def _arrays(confidence, correct):
    conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
    corr = np.asarray(correct).reshape(-1).astype(bool)
    if conf.shape != corr.shape:
        raise ValueError(f"{conf.size} confidences but {corr.size} correctness flags")
    if conf.size == 0:
        raise EmptyInputError("no records")
    if np.any(~np.isfinite(conf)) or np.any((conf < 0) | (conf > 1)):
        raise ParameterError("confidences must lie in [0, 1]")
    return conf, corr


def bin_edges(n_bins: int = N_BINS) -> np.ndarray:
    if n_bins < 1:
        raise ParameterError("need at least one bin")
    return np.arange(n_bins + 1, dtype=np.float64) / n_bins


def bin_indices(confidence, n_bins: int = N_BINS) -> np.ndarray:
    edges = bin_edges(n_bins)
    idx = np.searchsorted(edges, np.asarray(confidence, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, n_bins - 1)


@dataclass
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    accuracy: float


def reliability_data(confidence, correct, n_bins: int = N_BINS) -> list[ReliabilityBin]:
    """Per-bin counts, mean confidence and accuracy for all ``n_bins`` bins.

    Empty bins report zero mean confidence and accuracy.
    """
    conf, corr = _arrays(confidence, correct)
    edges = bin_edges(n_bins)
    idx = bin_indices(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    corr_sum = np.bincount(idx, weights=corr.astype(np.float64), minlength=n_bins)
    out = []
    for b in range(n_bins):
        n = int(counts[b])
        out.append(
            ReliabilityBin(
                lo=float(edges[b]),
                hi=float(edges[b + 1]),
                count=n,
                mean_confidence=float(conf_sum[b] / n) if n else 0.0,
                accuracy=float(corr_sum[b] / n) if n else 0.0,
            )
        )
    return out


def ece_from_bins(bins: list[ReliabilityBin]) -> float:
    total = sum(b.count for b in bins)
    if total == 0:
        raise EmptyInputError("no records")
    return float(
        sum(b.count / total * abs(b.accuracy - b.mean_confidence) for b in bins if b.count)
    )


def ece(confidence, correct, n_bins: int = N_BINS) -> float:
    return ece_from_bins(reliability_data(confidence, correct, n_bins))


def mce(confidence, correct, n_bins: int = N_BINS) -> float:
    bins = reliability_data(confidence, correct, n_bins)
    return float(max(abs(b.accuracy - b.mean_confidence) for b in bins if b.count))


def ace(confidence, correct, n_bins: int = N_BINS) -> float:
    """Adaptive calibration error over equal-mass bins.

    Records are sorted by confidence (stable) and cut into ``n_bins``
    contiguous groups; the first ``N mod n_bins`` groups get one extra record.
    """
    conf, corr = _arrays(confidence, correct)
    N = conf.size
    if N < n_bins:
        raise ParameterError(f"ACE needs at least {n_bins} records, got {N}")
    order = np.argsort(conf, kind="stable")
    conf, corr = conf[order], corr[order].astype(np.float64)
    base, extra = divmod(N, n_bins)
    gaps = []
    start = 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        sl = slice(start, start + size)
        gaps.append(abs(corr[sl].mean() - conf[sl].mean()))
        start += size
    return float(np.mean(gaps))


def kde_bandwidth(confidence) -> float:
    """Silverman's rule ``1.06 * std * N^(-1/5)`` clamped to [0.05, 0.3]."""
    conf = np.asarray(confidence, dtype=np.float64)
    sd = float(np.std(conf, ddof=1)) if conf.size > 1 else 0.0
    if sd == 0.0:
        return 0.05
    return float(np.clip(1.06 * sd * conf.size ** -0.2, 0.05, 0.3))


def ece_kde(confidence, correct, bandwidth: float | None = None, chunk: int = 2048) -> float:
    """Binning-free calibration error with a Gaussian Nadaraya-Watson smoother.

    The smoothed accuracy is evaluated at each sample's own confidence.
    """
    conf, corr = _arrays(confidence, correct)
    N = conf.size
    if N < 2:
        raise ParameterError("ECE-KDE needs at least two records")
    if bandwidth is None:
        h = kde_bandwidth(conf)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ParameterError("bandwidth must be positive")
    y = corr.astype(np.float64)
    smoothed = np.empty(N)
    for start in range(0, N, chunk):
        c = conf[start:start + chunk, None]
        w = np.exp(-0.5 * ((c - conf[None, :]) / h) ** 2)
        smoothed[start:start + chunk] = (w @ y) / w.sum(axis=1)
    return float(np.mean(np.abs(smoothed - conf)))


def misclassification_histogram(confidence, correct, n_bins: int = N_BINS):
    """Fraction of all errors falling in each confidence bin.

    Returns ``(fractions, empty)``; with no errors, ``fractions`` is all zero
    and ``empty`` is True.
    """
    conf, corr = _arrays(confidence, correct)
    wrong = conf[~corr]
    if wrong.size == 0:
        return np.zeros(n_bins), True
    counts = np.bincount(bin_indices(wrong, n_bins), minlength=n_bins)
    return counts / wrong.size, False


def verdict(accuracy_pct: float, mean_confidence_pct: float, tolerance: float = VERDICT_TOLERANCE) -> str:
    gap = mean_confidence_pct - accuracy_pct
    if gap > tolerance:
        return OVERCONFIDENT
    if -gap > tolerance:
        return UNDERCONFIDENT
    return CALIBRATED


@dataclass
class CalibrationReport:
    n: int
    accuracy: float
    mean_confidence: float
    ece: float
    ace: float
    mce: float
    ece_kde: float
    verdict: str
    bins: list[ReliabilityBin] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "acc": self.accuracy,
            "mean_conf": self.mean_confidence,
            "ece": self.ece,
            "ace": self.ace,
            "mce": self.mce,
            "ece_kde": self.ece_kde,
            "verdict": self.verdict,
            "n": self.n,
            "bins": [
                {
                    "lo": b.lo,
                    "hi": b.hi,
                    "count": b.count,
                    "mean_conf": b.mean_confidence,
                    "acc": b.accuracy,
                }
                for b in self.bins
            ],
        }


def calibration_report(
    confidence, correct, n_bins: int = N_BINS, tolerance: float = VERDICT_TOLERANCE
) -> CalibrationReport:
    """All metrics in percent. ACE uses ``min(n_bins, N)`` bins; for N=1 the
    KDE estimate degenerates to ``|correct - confidence|``, which is reported."""
    conf, corr = _arrays(confidence, correct)
    N = conf.size
    bins = reliability_data(conf, corr, n_bins)
    acc = 100.0 * float(corr.mean())
    mean_conf = 100.0 * float(conf.mean())
    kde = ece_kde(conf, corr) if N >= 2 else abs(float(corr[0]) - float(conf[0]))
    return CalibrationReport(
        n=N,
        accuracy=acc,
        mean_confidence=mean_conf,
        ece=100.0 * ece_from_bins(bins),
        ace=100.0 * ace(conf, corr, min(n_bins, N)),
        mce=100.0 * float(max(abs(b.accuracy - b.mean_confidence) for b in bins if b.count)),
        ece_kde=100.0 * kde,
        verdict=verdict(acc, mean_conf, tolerance),
        bins=bins,
    )


# ----------------------------------------------------------------------------
# Temperature scaling
# ----------------------------------------------------------------------------

T_MIN, T_MAX = 0.05, 20.0
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def temperature_nll(logits, labels, temperature: float) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    probs = softmax_rows(logits / temperature, 1.0)
    p = np.maximum(probs[np.arange(y.size), y], 1e-300)
    return float(-np.mean(np.log(p)))


def fit_temperature(logits, labels, lo: float = T_MIN, hi: float = T_MAX, tol: float = 1e-4) -> float:
    """Golden-section search for the NLL-minimizing temperature in ``[lo, hi]``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise EmptyInputError("need at least one row of logits")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != logits.shape[0]:
        raise ValueError("labels and logits disagree in length")
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc = temperature_nll(logits, y, c)
    fd = temperature_nll(logits, y, d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = temperature_nll(logits, y, c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = temperature_nll(logits, y, d)
    return (a + b) / 2.0


def apply_temperature(logits, temperature: float) -> np.ndarray:
    return softmax_rows(np.asarray(logits, dtype=np.float64) / temperature, 1.0)
