"""Command-line front end: ``gen``, ``train``, ``eval`` and ``sweep``.

Exit codes: 0 success, 2 usage or parse error, 3 numeric divergence.
Configuration precedence: built-in defaults < profile < ``--config`` JSON <
explicit flags. Every training bundle contains ``config.json``, the fully
resolved configuration; ``train --config out/config.json`` reproduces it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dmod
from .errors import CalibBenchError, DivergenceError, ParseError
from .losses import BASELINES, DEFAULT_BASELINE_WEIGHTS, TASKS, LossConfig
from .metrics import calibration_report
from .model import FrozenEncoder, PromptBank, classify, encode_text
from .trainer import SWEEP_AXES, TrainConfig, evaluate, format_log, format_sweep, sweep, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
SEED_ENV = "CALIBBENCH_SEED"

PROFILES = {
    "custom": {},
    "histopathology": {
        "ls_alpha": 0.05, "fl_gamma": 3.0, "smac_weight": 1.0, "smac_alpha": 0.05,
        "as_weight": 0.01, "mmce_weight": 1.0,
    },
    "radiology": {
        "ls_alpha": 0.2, "fl_gamma": 3.0, "smac_weight": 1.0, "smac_alpha": 0.1,
        "as_weight": 3.0, "mmce_weight": 2.0,
    },
}

SYNTH_KEYS = ("classes", "dim", "overlap", "train_per_class", "test_per_class", "noise")

DEFAULTS = {
    "data": None,
    "classes": 4, "dim": 64, "overlap": 0.5, "train_per_class": 32,
    "test_per_class": 200, "noise": 0.6,
    "seed": 0, "mismatch": False, "profile": "custom",
    "loss": "ce", "ls_alpha": 0.05, "fl_gamma": 3.0,
    "smac_weight": 0.0, "smac_alpha": 0.05, "as_weight": 0.0,
    "baseline": None, "baseline_weight": None, "mmce_weight": 1.0,
    "mbls_margin": 10.0, "mbls_weight": 0.1, "mmce_bandwidth": 0.4, "logitnorm_tau": 1.0,
    "lr": 0.002, "steps": 200, "momentum": 0.9, "shots": 8,
    "context_length": 16, "token_dim": 32, "tau": 100.0, "eval_every": 10,
}


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# ----------------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------------


def _add_synthetic_args(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--classes", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--overlap", type=float)
    g.add_argument("--train-per-class", type=int)
    g.add_argument("--test-per-class", type=int)
    g.add_argument("--noise", type=float)


def _add_train_args(p):
    p.add_argument("--data", help="embeddings CSV (instead of synthetic data)")
    _add_synthetic_args(p)
    p.add_argument("--config", help="JSON file with flat keys mirroring the flags")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--seed", type=int)
    p.add_argument("--mismatch", action="store_const", const=True,
                   help="decouple the encoder's class anchors from the data seed")
    g = p.add_argument_group("loss")
    g.add_argument("--loss", choices=TASKS)
    g.add_argument("--ls-alpha", type=float)
    g.add_argument("--fl-gamma", type=float)
    g.add_argument("--smac-weight", type=float)
    g.add_argument("--smac-alpha", type=float)
    g.add_argument("--as-weight", type=float)
    g.add_argument("--baseline", choices=BASELINES + ("none",))
    g.add_argument("--baseline-weight", type=float)
    g.add_argument("--mbls-margin", type=float)
    g.add_argument("--mbls-weight", type=float)
    g.add_argument("--mmce-bandwidth", type=float)
    g.add_argument("--logitnorm-tau", type=float)
    g = p.add_argument_group("optimization")
    g.add_argument("--lr", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--momentum", type=float)
    g.add_argument("--shots", type=int)
    g.add_argument("--context-length", type=int)
    g.add_argument("--token-dim", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--eval-every", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibbench", description="Calibration-aware prompt tuning on embedding data."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic embeddings CSV")
    _add_synthetic_args(p)
    p.add_argument("--class-names", help="comma-separated class names")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("train", help="prompt-tune and write a report bundle")
    _add_train_args(p)
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = sub.add_parser("eval", help="score predictions or a prompt bank")
    p.add_argument("--pred", help="predictions CSV")
    p.add_argument("--data", help="embeddings CSV (with --prompts)")
    p.add_argument("--prompts", help="prompts CSV from a training bundle")
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float, default=100.0)
    p.add_argument("--mismatch", action="store_true")
    p.add_argument("--tolerance", type=float, default=1.0,
                   help="verdict tolerance in percentage points")
    p.add_argument("-o", "--output", help="output directory (default: print JSON)")

    p = sub.add_parser("sweep", help="ablation over shots, context length or loss")
    _add_train_args(p)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("-o", "--output", required=True, help="sweep CSV path")
    return parser


# ----------------------------------------------------------------------------
# Config resolution
# ----------------------------------------------------------------------------


def resolve_config(args) -> dict:
    explicit = {k: getattr(args, k) for k in DEFAULTS if getattr(args, k, None) is not None}
    from_file = {}
    if getattr(args, "config", None):
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(from_file) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")

    profile = explicit.get("profile", from_file.get("profile", DEFAULTS["profile"]))
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}")
    cfg = dict(DEFAULTS)
    if "seed" not in explicit and "seed" not in from_file:
        cfg["seed"] = _default_seed()
    cfg.update(PROFILES[profile])
    cfg.update(from_file)
    cfg.update(explicit)
    cfg["profile"] = profile

    if cfg["data"] is not None:
        clash = [k for k in SYNTH_KEYS if k in explicit]
        if clash:
            raise UsageError(
                "--data excludes synthetic-data flags: " + ", ".join("--" + k.replace("_", "-") for k in clash)
            )
        for k in SYNTH_KEYS:
            cfg[k] = None
    if cfg["baseline"] == "none":
        cfg["baseline"] = None
    if cfg["baseline"] is not None and cfg["baseline_weight"] is None:
        cfg["baseline_weight"] = (
            cfg["mmce_weight"] if cfg["baseline"] == "mmce"
            else DEFAULT_BASELINE_WEIGHTS[cfg["baseline"]]
        )
    return cfg


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(
        task=cfg["loss"], ls_alpha=cfg["ls_alpha"], fl_gamma=cfg["fl_gamma"],
        smac_weight=cfg["smac_weight"], smac_alpha=cfg["smac_alpha"], as_weight=cfg["as_weight"],
        baseline=cfg["baseline"], baseline_weight=cfg["baseline_weight"],
        mbls_margin=cfg["mbls_margin"], mbls_weight=cfg["mbls_weight"],
        mmce_bandwidth=cfg["mmce_bandwidth"], logitnorm_tau=cfg["logitnorm_tau"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        loss=loss_config(cfg), learning_rate=cfg["lr"], steps=cfg["steps"],
        momentum=cfg["momentum"], shots=cfg["shots"], context_length=cfg["context_length"],
        token_dim=cfg["token_dim"], tau=cfg["tau"], seed=cfg["seed"], eval_every=cfg["eval_every"],
    )


def load_dataset(cfg: dict) -> dmod.EmbeddingDataset:
    if cfg["data"] is not None:
        return dmod.load_embeddings(cfg["data"])
    spec = dmod.SyntheticSpec(
        n_classes=cfg["classes"], feature_dim=cfg["dim"], overlap=cfg["overlap"],
        train_per_class=cfg["train_per_class"], test_per_class=cfg["test_per_class"],
        noise_sigma=cfg["noise"], seed=cfg["seed"],
    )
    return dmod.generate(spec)


def build_encoder(cfg: dict, ds: dmod.EmbeddingDataset) -> FrozenEncoder:
    return FrozenEncoder(
        cfg["seed"], ds.n_classes, cfg["context_length"], cfg["token_dim"], ds.feature_dim,
        matched=not cfg["mismatch"],
    )


# ----------------------------------------------------------------------------
# File writers
# ----------------------------------------------------------------------------


def _write(path: Path, text: str):
    path.write_bytes(text.encode("utf-8"))


def metrics_json(report) -> str:
    return json.dumps(report.to_json_dict(), indent=2) + "\n"


def reliability_csv(report) -> str:
    lines = ["lo,hi,count,mean_conf,acc"]
    for b in report.bins:
        lines.append(",".join([dmod.fmt(b.lo), dmod.fmt(b.hi), str(b.count),
                               dmod.fmt(b.mean_confidence), dmod.fmt(b.accuracy)]))
    return "\n".join(lines) + "\n"


def format_prompts(bank: PromptBank) -> str:
    lines = [f"#prompts: classes={bank.n_classes},context_length={bank.context_length}"]
    lines.append(",".join(f"t{j}" for j in range(bank.token_dim)))
    for row in bank.tokens.value:
        lines.append(",".join(dmod.fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def load_prompts(path) -> PromptBank:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith("#prompts:"):
        raise ParseError("first line must be '#prompts: classes=K,context_length=M'", 1)
    try:
        meta = dict(kv.split("=") for kv in lines[0][len("#prompts:"):].strip().split(","))
        K, M = int(meta["classes"]), int(meta["context_length"])
    except (ValueError, KeyError):
        raise ParseError("malformed prompts header", 1) from None
    rows = []
    for i, ln in enumerate(lines[2:]):
        try:
            rows.append([float(t) for t in ln.split(",")])
        except ValueError:
            raise ParseError("not a number", i + 3) from None
    tokens = np.array(rows, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] != K * M or not np.all(np.isfinite(tokens)):
        raise ParseError(f"expected {K * M} finite token rows")
    return PromptBank(tokens, K, M)


def write_bundle(out: Path, art, cfg: dict):
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "metrics.json", metrics_json(art.report))
    _write(out / "reliability.csv", reliability_csv(art.report))
    _write(out / "predictions.csv", dmod.format_predictions(art.predictions))
    _write(out / "train_log.csv", format_log(art.log))
    _write(out / "prompts.csv", format_prompts(art.bank))
    _write(out / "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------


def cmd_gen(args) -> int:
    d = DEFAULTS
    names = tuple(n.strip() for n in args.class_names.split(",")) if args.class_names else None
    spec = dmod.SyntheticSpec(
        n_classes=args.classes if args.classes is not None else d["classes"],
        feature_dim=args.dim if args.dim is not None else d["dim"],
        overlap=args.overlap if args.overlap is not None else d["overlap"],
        train_per_class=args.train_per_class if args.train_per_class is not None else d["train_per_class"],
        test_per_class=args.test_per_class if args.test_per_class is not None else d["test_per_class"],
        noise_sigma=args.noise if args.noise is not None else d["noise"],
        seed=args.seed if args.seed is not None else _default_seed(),
        class_names=names,
    )
    dmod.save_embeddings(dmod.generate(spec), args.output)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    tcfg = train_config(cfg)
    ds = load_dataset(cfg)
    enc = build_encoder(cfg, ds)
    split = dmod.few_shot_split(ds, tcfg.shots, tcfg.seed)
    art = train(ds, split, enc, tcfg)
    write_bundle(Path(args.output), art, cfg)
    r = art.report
    print(f"acc={r.accuracy:.2f}% ece={r.ece:.2f}% verdict={r.verdict} -> {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.pred and (args.data or args.prompts):
        raise UsageError("use either --pred or --data with --prompts")
    if args.pred:
        pf = dmod.load_prediction_records(args.pred)
        report = calibration_report(pf.confidence, pf.correct, tolerance=args.tolerance)
        batch = None
    elif args.data and args.prompts:
        ds = dmod.load_embeddings(args.data)
        bank = load_prompts(args.prompts)
        seed = args.seed if args.seed is not None else _default_seed()
        enc = FrozenEncoder(seed, ds.n_classes, bank.context_length, bank.token_dim,
                            ds.feature_dim, matched=not args.mismatch)
        batch = classify(ds.features, encode_text(bank, enc), args.tau, ds.labels)
        report = calibration_report(batch.confidence, batch.correct, tolerance=args.tolerance)
    else:
        raise UsageError("eval needs --pred, or --data together with --prompts")

    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "metrics.json", metrics_json(report))
        _write(out / "reliability.csv", reliability_csv(report))
        if batch is not None:
            _write(out / "predictions.csv", dmod.format_predictions(batch))
    else:
        sys.stdout.write(metrics_json(report))
    return EXIT_OK


def _int_list(text: str, what: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers") from None


def cmd_sweep(args) -> int:
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown axis {args.axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    cfg = resolve_config(args)
    base = train_config(cfg)
    if args.axis == "loss":
        values = [v.strip() for v in args.values.split(",") if v.strip()]
    else:
        values = _int_list(args.values, "--values")
    seeds = _int_list(args.seeds, "--seeds")
    if not values or not seeds:
        raise UsageError("need at least one value and one seed")
    ds = load_dataset(cfg)
    enc = build_encoder(cfg, ds)
    rows = sweep(args.axis, values, base, ds, enc, seeds, jobs=args.jobs)
    _write(Path(args.output), format_sweep(rows))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, CalibBenchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
