"""Few-shot prompt tuning, evaluation and ablation sweeps."""

from __future__ import annotations

import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import EmbeddingDataset, FewShotSplit, few_shot_split, fmt
from .errors import DataError, DivergenceError, EmptyInputError, ParameterError
from .losses import BASELINES, STANDALONE_BASELINES, TASKS, LossConfig, combined_objective
from .metrics import CalibrationReport, calibration_report
from .model import (
    ClassifierConfig,
    FrozenEncoder,
    PredictionBatch,
    PromptBank,
    classify,
    encode_text,
    init_prompts,
    text_similarity_stats,
)

LOG_COLUMNS = (
    "step", "total", "ce", "smac", "as", "baseline",
    "train_acc", "test_acc", "test_ece", "mean_offdiag_cos",
)
SWEEP_COLUMNS = ("axis", "value", "seed", "acc", "ece", "status")
SWEEP_AXES = ("shots", "context_length", "loss")
DEFAULT_AS_WEIGHT = 0.01


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 0.002
    steps: int = 200
    momentum: float = 0.9
    shots: int = 8
    context_length: int = 16
    token_dim: int = 32
    tau: float = 100.0
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ParameterError("learning rate must be finite and >= 0")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.shots < 1:
            raise ParameterError("shots must be >= 1")
        if self.context_length < 1:
            raise ParameterError("context length must be >= 1")
        if self.eval_every < 1:
            raise ParameterError("eval_every must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")
        if not self.tau > 0:
            raise ParameterError("tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLogRow:
    step: int
    total: float
    components: dict
    train_acc: float
    test_acc: float
    test_ece: float
    mean_offdiag_cos: float


@dataclass
class TrainedArtifact:
    bank: PromptBank
    initial_bank: PromptBank
    report: CalibrationReport
    predictions: PredictionBatch
    log: list[TrainLogRow]
    config: dict


def evaluate(bank: PromptBank, enc: FrozenEncoder, ds: EmbeddingDataset, indices, tau: float):
    """Classify ``ds[indices]`` and score it with 10-bin metrics."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise EmptyInputError("no evaluation indices")
    text = encode_text(bank, enc)
    batch = classify(ds.features[idx], text, tau, ds.labels[idx])
    report = calibration_report(batch.confidence, batch.correct)
    return report, batch


def sgd_momentum_step(param, velocity: np.ndarray, lr: float, momentum: float) -> np.ndarray:
    """``v <- momentum * v + grad``; ``value <- value - lr * v``. Returns ``v``."""
    velocity = momentum * velocity + param.grad
    param.value = param.value - lr * velocity
    return velocity


def train(ds: EmbeddingDataset, split: FewShotSplit, enc: FrozenEncoder, cfg: TrainConfig) -> TrainedArtifact:
    """Full-batch momentum SGD on the prompt tokens only."""
    if ds.n_classes != enc.n_classes or ds.feature_dim != enc.feature_dim:
        raise DataError("dataset and encoder dimensions disagree")
    if cfg.token_dim != enc.token_dim:
        raise DataError("token_dim does not match the encoder")
    ccfg = ClassifierConfig(
        ds.n_classes, cfg.context_length, cfg.token_dim, ds.feature_dim, cfg.tau, cfg.seed
    )
    bank = init_prompts(ccfg)
    initial = bank.copy()
    train_idx = split.train
    x_train = ds.features[train_idx]
    y_train = ds.labels[train_idx]
    velocity = np.zeros_like(bank.tokens.value)
    log: list[TrainLogRow] = []

    for step in range(cfg.steps + 1):
        bank.tokens.zero_grad()
        lv = combined_objective(bank, enc, x_train, y_train, cfg.loss, cfg.tau)
        if not (math.isfinite(lv.total) and np.all(np.isfinite(bank.tokens.grad))):
            raise DivergenceError(step, {"total": lv.total, **lv.components})
        if step % cfg.eval_every == 0 or step == cfg.steps:
            log.append(_log_row(step, lv, bank, enc, ds, split, cfg.tau))
        if step == cfg.steps:
            break
        velocity = sgd_momentum_step(bank.tokens, velocity, cfg.learning_rate, cfg.momentum)

    report, batch = evaluate(bank, enc, ds, split.test_indices, cfg.tau)
    return TrainedArtifact(bank, initial, report, batch, log, cfg.to_dict())


def _log_row(step, lv, bank, enc, ds, split, tau) -> TrainLogRow:
    train_report, _ = evaluate(bank, enc, ds, split.train, tau)
    test_report, _ = evaluate(bank, enc, ds, split.test_indices, tau)
    stats = text_similarity_stats(encode_text(bank, enc))
    return TrainLogRow(
        step=step,
        total=lv.total,
        components=dict(lv.components),
        train_acc=train_report.accuracy,
        test_acc=test_report.accuracy,
        test_ece=test_report.ece,
        mean_offdiag_cos=stats["mean_offdiag"],
    )


def format_log(rows: list[TrainLogRow]) -> str:
    out = io.StringIO()
    out.write(",".join(LOG_COLUMNS) + "\n")
    for r in rows:
        comp = r.components
        cells = [
            str(r.step),
            fmt(r.total),
            fmt(comp["task"]),
            fmt(comp["smac"]) if "smac" in comp else "",
            fmt(comp["as"]) if "as" in comp else "",
            fmt(comp["baseline"]) if "baseline" in comp else "",
            fmt(r.train_acc),
            fmt(r.test_acc),
            fmt(r.test_ece),
            fmt(r.mean_offdiag_cos),
        ]
        out.write(",".join(cells) + "\n")
    return out.getvalue()


# ----------------------------------------------------------------------------
# Sweeps
# ----------------------------------------------------------------------------


def loss_variant(name: str, base: LossConfig) -> LossConfig:
    """Build a loss config from a name such as ``ce+smac+as`` or ``mbls``.

    The first part is a task (ce, ls, fl) or a standalone baseline (mbls,
    logitnorm, which use CE as their nominal task). Further parts switch on
    ``smac``, ``as`` or one additive baseline. Hyperparameters come from
    ``base``; switched-on terms whose base weight is 0 get default weights.
    """
    parts = [p.strip().lower() for p in name.split("+") if p.strip()]
    if not parts:
        raise ParameterError("empty loss variant")
    head, rest = parts[0], parts[1:]
    task, baseline = "ce", None
    if head in TASKS:
        task = head
    elif head in STANDALONE_BASELINES:
        baseline = head
    else:
        raise ParameterError(f"unknown loss variant head {head!r}")
    smac_w, as_w = 0.0, 0.0
    if len(set(rest)) != len(rest):
        raise ParameterError(f"duplicate part in loss variant {name!r}")
    for p in rest:
        if p == "smac":
            smac_w = base.smac_weight if base.smac_weight > 0 else 1.0
        elif p == "as":
            as_w = base.as_weight if base.as_weight > 0 else DEFAULT_AS_WEIGHT
        elif p in BASELINES and p not in STANDALONE_BASELINES and baseline is None:
            baseline = p
        else:
            raise ParameterError(f"unknown or duplicate loss variant part {p!r}")
    keep_weight = base.baseline_weight if base.baseline == baseline else None
    return replace(
        base, task=task, smac_weight=smac_w, as_weight=as_w,
        baseline=baseline, baseline_weight=keep_weight,
    )


@dataclass
class SweepRow:
    axis: str
    value: str
    seed: int
    acc: float | None
    ece: float | None
    status: str


def _config_for(axis: str, value, base: TrainConfig, seed: int) -> TrainConfig:
    if axis == "shots":
        return replace(base, shots=int(value), seed=seed)
    if axis == "context_length":
        return replace(base, context_length=int(value), seed=seed)
    if axis == "loss":
        return replace(base, loss=loss_variant(str(value), base.loss), seed=seed)
    raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def _run_one(args) -> SweepRow:
    axis, value, seed, base, ds, enc = args
    cfg = _config_for(axis, value, base, seed)
    try:
        split = few_shot_split(ds, cfg.shots, seed)
        art = train(ds, split, enc, cfg)
    except DivergenceError as exc:
        return SweepRow(axis, str(value), seed, None, None, f"diverged at step {exc.step}")
    return SweepRow(axis, str(value), seed, art.report.accuracy, art.report.ece, "ok")


def sweep(axis: str, values, base: TrainConfig, ds: EmbeddingDataset, enc: FrozenEncoder,
          seeds, jobs: int = 1) -> list[SweepRow]:
    """One train/evaluate run per (value, seed), ordered value-major."""
    if axis not in SWEEP_AXES:
        raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    for v in values:  # fail fast on bad values before spending time on runs
        _config_for(axis, v, base, 0)
    tasks = [(axis, v, int(s), base, ds, enc) for v in values for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]


def format_sweep(rows: list[SweepRow]) -> str:
    out = io.StringIO()
    out.write(",".join(SWEEP_COLUMNS) + "\n")
    for r in rows:
        acc = "" if r.acc is None else fmt(r.acc)
        ece = "" if r.ece is None else fmt(r.ece)
        out.write(f"{r.axis},{r.value},{r.seed},{acc},{ece},{r.status}\n")
    return out.getvalue()
