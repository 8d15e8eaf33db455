"""Independent oracles and random-case builders shared by the test modules.

The binning oracles below deliberately avoid numpy vectorization and the
library's own bin assignment: each record is placed by an explicit interval
test so that an off-by-one in ``searchsorted`` would show up as a mismatch.
"""

import math

import numpy as np

from calibbench import gradcore as gc
from calibbench import losses as L

KINK_MARGIN = 1e-3


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# brute-force calibration metrics
# ---------------------------------------------------------------------------


def _bin_of(c, n_bins):
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        if (lo < c <= hi) or (b == 0 and c == 0.0):
            return b
    raise AssertionError(f"confidence {c} fell outside every bin")


def brute_bins(conf, correct, n_bins=10):
    groups = [[] for _ in range(n_bins)]
    for c, k in zip(conf, correct):
        groups[_bin_of(float(c), n_bins)].append((float(c), float(bool(k))))
    return groups


def brute_ece(conf, correct, n_bins=10):
    n = len(conf)
    total = 0.0
    for g in brute_bins(conf, correct, n_bins):
        if g:
            acc = sum(k for _, k in g) / len(g)
            mc = sum(c for c, _ in g) / len(g)
            total += len(g) / n * abs(acc - mc)
    return total


def brute_mce(conf, correct, n_bins=10):
    worst = 0.0
    for g in brute_bins(conf, correct, n_bins):
        if g:
            acc = sum(k for _, k in g) / len(g)
            mc = sum(c for c, _ in g) / len(g)
            worst = max(worst, abs(acc - mc))
    return worst


def brute_ace(conf, correct, n_bins=10):
    pairs = sorted(zip((float(c) for c in conf), (float(bool(k)) for k in correct)),
                   key=lambda t: t[0])
    n = len(pairs)
    sizes = [n // n_bins + (1 if b < n % n_bins else 0) for b in range(n_bins)]
    gaps, start = [], 0
    for s in sizes:
        chunk = pairs[start:start + s]
        start += s
        acc = sum(k for _, k in chunk) / s
        mc = sum(c for c, _ in chunk) / s
        gaps.append(abs(acc - mc))
    return sum(gaps) / n_bins


def brute_mmce(conf, correct, bandwidth=0.4):
    n = len(conf)
    acc = 0.0
    for i in range(n):
        for j in range(n):
            k = math.exp(-abs(conf[i] - conf[j]) / bandwidth)
            acc += (conf[i] - correct[i]) * (conf[j] - correct[j]) * k
    return math.sqrt(acc / (n * n))


def brute_mbls_penalty(logits, margin):
    n, k = len(logits), len(logits[0])
    total = 0.0
    for row in logits:
        top = max(row)
        for v in row:
            total += max(0.0, top - v - margin)
    return total / (n * k)


# ---------------------------------------------------------------------------
# random, kink-free loss instances for finite-difference checks
# ---------------------------------------------------------------------------


def _top_gap(x):
    s = np.sort(x, axis=1)
    return float(np.min(s[:, -1] - s[:, -2]))


def _smac_margin(probs, y, alpha):
    target = L.smoothed_frequencies(y, probs.shape[1], alpha)
    return float(np.min(np.abs(probs.mean(axis=0, keepdims=True) - target)))


def _conf_spread(conf):
    d = np.abs(conf[:, None] - conf[None, :])
    return float(np.min(d[~np.eye(conf.size, dtype=bool)])) if conf.size > 1 else 1.0


def _dca_margin(probs, y):
    conf = probs.max(axis=1)
    acc = np.mean(np.argmax(probs, axis=1) == y)
    return abs(conf.mean() - acc)


def loss_case(name, rng, n=8, k=4):
    """``(parameter, f)`` for one loss, at a point at least KINK_MARGIN from kinks.

    Probability losses are driven through a softmax of the parameter so
    that finite-difference perturbations stay on the simplex.
    """
    for _ in range(1000):
        y = rng.integers(0, k, size=n)
        if name == "as":
            x = rng.standard_normal((k, 6))
            return gc.Parameter(x), lambda z: L.as_loss(gc.row_l2_normalize(z))
        logits = rng.normal(0.0, 1.5, size=(n, k))
        probs = gc.softmax_rows(logits, 1.0)
        if name in ("ce", "ls", "fl"):
            fn = {
                "ce": lambda p: L.ce_loss(p, y),
                "ls": lambda p: L.label_smoothing_loss(p, y, 0.1),
                "fl": lambda p: L.focal_loss(p, y, 3.0),
            }[name]
            return gc.Parameter(logits), lambda z, fn=fn: fn(gc.softmax_rows(z, 1.0))
        if name in ("smac", "mdca"):
            alpha = 0.05 if name == "smac" else 0.0
            if _smac_margin(probs, y, alpha) < KINK_MARGIN:
                continue
            return gc.Parameter(logits), lambda z: L.smac_loss(gc.softmax_rows(z, 1.0), y, alpha)
        if name == "dca":
            if _top_gap(logits) < KINK_MARGIN or _dca_margin(probs, y) < KINK_MARGIN:
                continue
            return gc.Parameter(logits), lambda z: L.dca_loss(gc.softmax_rows(z, 1.0), y)
        if name == "mmce":
            conf = probs.max(axis=1)
            if _top_gap(logits) < KINK_MARGIN or _conf_spread(conf) < KINK_MARGIN:
                continue
            return gc.Parameter(logits), lambda z: L.mmce_loss(gc.softmax_rows(z, 1.0), y, 0.4)
        if name == "mbls":
            logits = rng.normal(0.0, 6.0, size=(n, k))
            gaps = logits.max(axis=1, keepdims=True) - logits - 3.0
            if _top_gap(logits) < KINK_MARGIN or np.min(np.abs(gaps)) < KINK_MARGIN:
                continue
            return gc.Parameter(logits), lambda z: L.mbls_loss(z, y, margin=3.0, weight=0.5)
        if name == "logitnorm":
            return gc.Parameter(logits), lambda z: L.logitnorm_loss(z, y, 0.5)
        raise KeyError(name)
    raise RuntimeError(f"could not find a kink-free point for {name}")


LOSS_NAMES = ("ce", "ls", "fl", "smac", "as", "mdca", "dca", "mmce", "mbls", "logitnorm")
