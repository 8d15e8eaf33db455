"""Training objectives: task losses, calibration regularizers, combined objective.

Probability-based losses take ``(N, K)`` probabilities; logit-based ones
(MbLS, LogitNorm) take the pre-softmax scores. All of them are written with
the primitives of :mod:`calibbench.gradcore`, so they return a plain 1x1
array for array inputs and a taped Var when given a Var.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from .errors import LabelError, ParameterError
from .model import FrozenEncoder, PromptBank, encode_text

PROB_CLAMP = 1e-12

TASKS = ("ce", "ls", "fl")
BASELINES = ("mdca", "dca", "mmce", "mbls", "logitnorm")
# These replace the task term instead of being added to it.
STANDALONE_BASELINES = ("mbls", "logitnorm")

DEFAULT_BASELINE_WEIGHTS = {
    "mdca": 1.0,
    "dca": 9.0,
    "mmce": 1.0,
    "mbls": 1.0,
    "logitnorm": 1.0,
}


@dataclass
class LossConfig:
    task: str = "ce"
    ls_alpha: float = 0.05
    fl_gamma: float = 3.0
    smac_weight: float = 0.0
    smac_alpha: float = 0.05
    as_weight: float = 0.0
    baseline: str | None = None
    baseline_weight: float | None = None
    mbls_margin: float = 10.0
    mbls_weight: float = 0.1
    mmce_bandwidth: float = 0.4
    logitnorm_tau: float = 1.0

    def __post_init__(self):
        self.task = self.task.lower()
        if self.task not in TASKS:
            raise ParameterError(f"unknown task loss {self.task!r}; expected one of {TASKS}")
        if self.baseline is not None:
            self.baseline = self.baseline.lower()
            if self.baseline in ("", "none"):
                self.baseline = None
        if self.baseline is not None and self.baseline not in BASELINES:
            raise ParameterError(f"unknown baseline {self.baseline!r}; expected one of {BASELINES}")
        if self.baseline is not None and self.baseline_weight is None:
            self.baseline_weight = DEFAULT_BASELINE_WEIGHTS[self.baseline]
        for name in ("smac_weight", "as_weight", "mbls_weight"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.baseline_weight is not None and self.baseline_weight < 0:
            raise ParameterError("baseline_weight must be >= 0")
        for name in ("smac_alpha", "ls_alpha"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ParameterError(f"{name} must lie in [0, 1)")
        if self.fl_gamma < 0:
            raise ParameterError("fl_gamma must be >= 0")
        if self.mbls_margin < 0:
            raise ParameterError("mbls_margin must be >= 0")
        if not self.mmce_bandwidth > 0:
            raise ParameterError("mmce_bandwidth must be positive")
        if not self.logitnorm_tau > 0:
            raise ParameterError("logitnorm_tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossValue:
    total: float
    components: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)

    def resum(self) -> float:
        return sum(self.weights[k] * v for k, v in self.components.items())


def _labels(labels, n_rows, n_classes):
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n_rows:
        raise LabelError(f"{y.shape[0]} labels for {n_rows} rows")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    return y


def _onehot(y, K):
    out = np.zeros((y.shape[0], K))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


# ----------------------------------------------------------------------------
# Task losses
# ----------------------------------------------------------------------------


def ce_loss(probs, labels):
    """Mean negative log-likelihood of the true class."""
    N, K = gc.value_of(probs).shape
    y = _labels(labels, N, K)
    p_true = gc.clamp_min(gc.pick(probs, y), PROB_CLAMP)
    return -gc.mean(gc.log(p_true))


def label_smoothing_loss(probs, labels, ls_alpha: float):
    N, K = gc.value_of(probs).shape
    y = _labels(labels, N, K)
    if not 0.0 <= ls_alpha < 1.0:
        raise ParameterError("ls_alpha must lie in [0, 1)")
    target = (1.0 - ls_alpha) * _onehot(y, K) + ls_alpha / K
    logp = gc.log(gc.clamp_min(probs, PROB_CLAMP))
    return -gc.sum_(gc.mul(logp, target)) / N


def focal_loss(probs, labels, fl_gamma: float):
    N, K = gc.value_of(probs).shape
    y = _labels(labels, N, K)
    if fl_gamma < 0:
        raise ParameterError("fl_gamma must be >= 0")
    p_true = gc.clamp_min(gc.pick(probs, y), PROB_CLAMP)
    modulator = gc.power(gc.relu(1.0 - p_true), fl_gamma)
    return -gc.mean(gc.mul(modulator, gc.log(p_true)))


# ----------------------------------------------------------------------------
# Calibration regularizers
# ----------------------------------------------------------------------------


def smoothed_frequencies(labels, n_classes: int, alpha: float) -> np.ndarray:
    """``(1 - alpha) f_c + alpha (1 - f_c) / (K - 1)`` as a (1, K) row."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    freq = np.bincount(y, minlength=n_classes).astype(np.float64) / y.shape[0]
    if alpha == 0.0:
        return freq.reshape(1, -1)
    if n_classes < 2:
        raise ParameterError("smoothing needs K >= 2")
    return ((1.0 - alpha) * freq + alpha * (1.0 - freq) / (n_classes - 1)).reshape(1, -1)


def smac_loss(probs, labels, smac_alpha: float):
    """Class-wise |mean predicted probability - smoothed label frequency|."""
    N, K = gc.value_of(probs).shape
    if N < 1:
        raise ParameterError("SMAC needs at least one sample")
    if not 0.0 <= smac_alpha < 1.0:
        raise ParameterError("smac_alpha must lie in [0, 1)")
    y = _labels(labels, N, K)
    target = smoothed_frequencies(y, K, smac_alpha)
    return gc.mean(gc.abs_(gc.sub(gc.mean(probs, axis=0), target)))


def mdca_loss(probs, labels):
    return smac_loss(probs, labels, 0.0)


def as_loss(text_features):
    """Mean off-diagonal cosine similarity between class text features."""
    K = gc.value_of(text_features).shape[0]
    if K < 2:
        raise ParameterError("angular separation needs K >= 2")
    sim = gc.matmul(text_features, gc.transpose(text_features))
    mask = 1.0 - np.eye(K)
    return gc.sum_(gc.mul(sim, mask)) / (K * (K - 1))


def _confidence_and_correct(probs, labels):
    pv = gc.value_of(probs)
    y = _labels(labels, *pv.shape)
    correct = (np.argmax(pv, axis=1) == y).astype(np.float64).reshape(-1, 1)
    return gc.row_max(probs), correct


def dca_loss(probs, labels):
    """|mean confidence - accuracy| over the batch."""
    conf, correct = _confidence_and_correct(probs, labels)
    return gc.abs_(gc.sub(gc.mean(conf), float(correct.mean())))


def mmce_loss(probs, labels, bandwidth: float = 0.4):
    """Unweighted MMCE with a Laplacian kernel ``exp(-|x - y| / bandwidth)``."""
    if not bandwidth > 0:
        raise ParameterError("MMCE bandwidth must be positive")
    conf, correct = _confidence_and_correct(probs, labels)
    N = correct.shape[0]
    if N < 1:
        raise ParameterError("MMCE needs at least one sample")
    gap = gc.sub(conf, correct)  # (N, 1)
    dist = gc.abs_(gc.sub(conf, gc.transpose(conf)))  # (N, N)
    kernel = gc.exp(gc.scale(dist, -1.0 / bandwidth))
    quad = gc.sum_(gc.mul(gc.matmul(gap, gc.transpose(gap)), kernel)) / (N * N)
    return gc.sqrt(quad)


def mbls_penalty(logits, margin: float):
    """Mean over all entries of ``max(0, max_j l_j - l_c - margin)``."""
    gaps = gc.sub(gc.row_max(logits), logits)
    return gc.mean(gc.relu(gc.sub(gaps, float(margin))))


def mbls_loss(logits, labels, margin: float = 10.0, weight: float = 0.1):
    if margin < 0:
        raise ParameterError("MbLS margin must be >= 0")
    probs = gc.softmax_rows(logits, 1.0)
    return gc.add(ce_loss(probs, labels), gc.scale(mbls_penalty(logits, margin), weight))


def logitnorm_loss(logits, labels, tau: float = 1.0):
    if not tau > 0:
        raise ParameterError("LogitNorm temperature must be positive")
    normed = gc.scale(gc.row_l2_normalize(logits), 1.0 / tau)
    return ce_loss(gc.softmax_rows(normed, 1.0), labels)


# ----------------------------------------------------------------------------
# Combined objective
# ----------------------------------------------------------------------------


def objective_terms(tokens, enc: FrozenEncoder, image_features, labels, cfg: LossConfig, tau):
    """Raw term values and their weights for the combined objective.

    ``tokens`` is the ``(K*M, d_tok)`` prompt matrix (array or Var). Returns
    ``(terms, weights, total)``; ``total`` is ``sum(weights[k] * terms[k])``.
    """
    text = encode_text(tokens, enc)
    sims = gc.matmul(image_features, gc.transpose(text))
    probs = gc.softmax_rows(sims, tau)
    logits = gc.scale(sims, tau)

    terms = {}
    weights = {}
    standalone = cfg.baseline in STANDALONE_BASELINES
    if cfg.task == "ce":
        terms["task"] = ce_loss(probs, labels)
    elif cfg.task == "ls":
        terms["task"] = label_smoothing_loss(probs, labels, cfg.ls_alpha)
    else:
        terms["task"] = focal_loss(probs, labels, cfg.fl_gamma)
    weights["task"] = 0.0 if standalone else 1.0

    if cfg.smac_weight > 0:
        terms["smac"] = smac_loss(probs, labels, cfg.smac_alpha)
        weights["smac"] = cfg.smac_weight
    if cfg.as_weight > 0:
        terms["as"] = as_loss(text)
        weights["as"] = cfg.as_weight
    if cfg.baseline is not None:
        b = cfg.baseline
        if b == "mdca":
            term = mdca_loss(probs, labels)
        elif b == "dca":
            term = dca_loss(probs, labels)
        elif b == "mmce":
            term = mmce_loss(probs, labels, cfg.mmce_bandwidth)
        elif b == "mbls":
            term = mbls_loss(logits, labels, cfg.mbls_margin, cfg.mbls_weight)
        else:
            term = logitnorm_loss(logits, labels, cfg.logitnorm_tau)
        terms["baseline"] = term
        weights["baseline"] = cfg.baseline_weight

    total = None
    for k, v in terms.items():
        if weights[k] == 0.0:
            continue
        piece = v if weights[k] == 1.0 else gc.scale(v, weights[k])
        total = piece if total is None else gc.add(total, piece)
    if total is None:
        total = gc.scale(terms["task"], 0.0)
    return terms, weights, total


def combined_objective(
    bank: PromptBank, enc: FrozenEncoder, image_features, labels, cfg: LossConfig, tau: float
) -> LossValue:
    """Evaluate the objective and accumulate its gradient into ``bank.tokens.grad``."""
    tape = gc.Tape()
    x = tape.watch(bank.tokens)
    terms, weights, total = objective_terms(x, enc, image_features, labels, cfg, tau)
    tape.backward(total)
    return LossValue(
        total=gc.scalar(total),
        components={k: gc.scalar(v) for k, v in terms.items()},
        weights=weights,
    )


def evaluate_objective(bank: PromptBank, enc, image_features, labels, cfg, tau) -> LossValue:
    """Forward-only variant of :func:`combined_objective`."""
    terms, weights, total = objective_terms(
        bank.tokens.value, enc, image_features, labels, cfg, tau
    )
    return LossValue(
        total=gc.scalar(total),
        components={k: gc.scalar(v) for k, v in terms.items()},
        weights=weights,
    )
