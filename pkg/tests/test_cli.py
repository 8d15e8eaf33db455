import json
import os
import subprocess
import sys

import numpy as np
import pytest

from calibbench import cli
from calibbench import data as D
from calibbench import metrics as M

FAST = ["--steps", "20", "--eval-every", "10"]
BUNDLE = ("metrics.json", "reliability.csv", "predictions.csv", "train_log.csv",
          "prompts.csv", "config.json")


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_all(folder):
    return {name: (folder / name).read_bytes() for name in BUNDLE}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "ds.csv"
    assert run("gen", "--classes", 4, "--dim", 64, "--overlap", 0.5, "--train-per-class", 32,
               "--test-per-class", 200, "--seed", 7, "-o", path) == 0
    return path


def test_gen_round_trip_and_determinism(dataset, tmp_path):
    ds = D.load_embeddings(dataset)
    assert len(ds) == 4 * 232 and ds.feature_dim == 64
    again = tmp_path / "again.csv"
    run("gen", "--classes", 4, "--dim", 64, "--overlap", 0.5, "--train-per-class", 32,
        "--test-per-class", 200, "--seed", 7, "-o", again)
    assert again.read_bytes() == dataset.read_bytes()


def test_gen_rejects_single_class(tmp_path, capsys):
    assert run("gen", "--classes", 1, "-o", tmp_path / "x.csv") == 2
    assert "K ≥ 2 required" in capsys.readouterr().err


def test_train_bundle_schema(dataset, tmp_path):
    out = tmp_path / "out"
    rc = run("train", "--data", dataset, "--shots", 8, "--loss", "ce", "--smac-weight", 1.0,
             "--smac-alpha", 0.05, "--as-weight", 0.01, "--seed", 0, "-o", out, *FAST)
    assert rc == 0
    for name in BUNDLE:
        assert (out / name).exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == {"acc", "mean_conf", "ece", "ace", "mce", "ece_kde", "verdict", "n", "bins"}
    assert set(metrics["bins"][0]) == {"lo", "hi", "count", "mean_conf", "acc"}
    assert len(metrics["bins"]) == 10
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["shots"] == 8 and cfg["as_weight"] == 0.01


def test_default_shots_is_eight(tmp_path):
    out = tmp_path / "o"
    assert run("train", "--classes", 3, "--train-per-class", 10, "--test-per-class", 10,
               "-o", out, *FAST) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["shots"] == 8
    ds_train_rows = (out / "predictions.csv").read_text().count("\n") - 1
    assert ds_train_rows == 3 * 20 - 3 * 8


def test_train_is_byte_identical_and_reproducible_from_snapshot(tmp_path):
    args = ["--classes", 3, "--train-per-class", 12, "--test-per-class", 30, "--seed", 4,
            "--smac-weight", 1, "--as-weight", 0.1, *FAST]
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run("train", *args, "-o", a) == 0
    assert run("train", *args, "-o", b) == 0
    assert read_all(a) == read_all(b)
    assert run("train", "--config", a / "config.json", "-o", c) == 0
    assert read_all(a) == read_all(c)


def test_zero_learning_rate_keeps_initial_metrics(tmp_path):
    out = tmp_path / "o"
    assert run("train", "--classes", 3, "--train-per-class", 10, "--test-per-class", 20,
               "--lr", 0, "-o", out, *FAST) == 0
    rows = (out / "train_log.csv").read_text().strip().split("\n")[1:]
    first, last = rows[0].split(","), rows[-1].split(",")
    assert first[6:] == last[6:]


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"as_weight": 0.5, "steps": 3}))
    args = cli.build_parser().parse_args(
        ["train", "--config", str(cfg_file), "--profile", "radiology", "--steps", "2", "-o", "x"]
    )
    cfg = cli.resolve_config(args)
    assert cfg["as_weight"] == 0.5  # file beats profile
    assert cfg["steps"] == 2  # flag beats file
    assert cfg["ls_alpha"] == 0.2 and cfg["smac_alpha"] == 0.1  # profile beats defaults
    args = cli.build_parser().parse_args(["train", "--profile", "histopathology",
                                          "--baseline", "mmce", "-o", "x"])
    cfg = cli.resolve_config(args)
    assert (cfg["smac_alpha"], cfg["as_weight"], cfg["baseline_weight"]) == (0.05, 0.01, 1.0)


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "11")
    args = cli.build_parser().parse_args(["train", "-o", "x"])
    assert cli.resolve_config(args)["seed"] == 11
    args = cli.build_parser().parse_args(["train", "--seed", "2", "-o", "x"])
    assert cli.resolve_config(args)["seed"] == 2


def test_usage_errors(dataset, tmp_path, capsys):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"learning_rate": 0.1}))
    assert run("train", "--config", bad_cfg, "-o", tmp_path / "o") == 2
    assert run("train", "--data", dataset, "--classes", 3, "-o", tmp_path / "o") == 2
    assert run("train", "--data", tmp_path / "missing.csv", "-o", tmp_path / "o") == 2
    with pytest.raises(SystemExit) as info:
        run("train", "--loss", "hinge", "-o", tmp_path / "o")
    assert info.value.code == 2
    capsys.readouterr()


def test_divergence_exit_code(tmp_path, capsys):
    with np.errstate(all="ignore"):
        rc = run("train", "--classes", 3, "--train-per-class", 4, "--test-per-class", 5,
                 "--shots", 2, "--lr", 1e308, "-o", tmp_path / "o", *FAST)
    assert rc == 3
    assert "step" in capsys.readouterr().err


def _verdict_file(path, n_correct, n, conf):
    rows = ["label,predicted,confidence"]
    rows += [f"0,{0 if i < n_correct else 1},{conf}" for i in range(n)]
    path.write_text("\n".join(rows) + "\n")


def test_eval_overconfident_file(tmp_path, capsys):
    path = tmp_path / "p.csv"
    _verdict_file(path, 8437, 10_000, 0.95)
    assert run("eval", "--pred", path) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["acc"] == pytest.approx(84.37)
    assert metrics["mean_conf"] == pytest.approx(95.0)
    assert metrics["verdict"] == "Overconfident"
    _verdict_file(path, 7877, 10_000, 0.5)
    run("eval", "--pred", path)
    assert json.loads(capsys.readouterr().out)["verdict"] == "Underconfident"


def test_eval_errors(tmp_path, capsys):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert run("eval", "--pred", empty) == 2
    bad = tmp_path / "b.csv"
    bad.write_text("label,predicted,confidence\n0,0,0.5\n0,0,2\n")
    assert run("eval", "--pred", bad) == 2
    assert "line 3" in capsys.readouterr().err
    assert run("eval") == 2


def test_eval_matches_training_bundle(tmp_path, capsys):
    out = tmp_path / "o"
    data = tmp_path / "ds.csv"
    run("gen", "--classes", 3, "--train-per-class", 10, "--test-per-class", 20, "--seed", 5, "-o", data)
    assert run("train", "--data", data, "--seed", 5, "-o", out, *FAST) == 0
    capsys.readouterr()
    assert run("eval", "--pred", out / "predictions.csv") == 0
    from_file = json.loads(capsys.readouterr().out)
    in_memory = json.loads((out / "metrics.json").read_text())
    for key in ("acc", "mean_conf", "ece", "ace", "mce", "ece_kde"):
        assert from_file[key] == pytest.approx(in_memory[key], abs=1e-9)
    pf = D.load_prediction_records(out / "predictions.csv")
    assert from_file["ece"] == pytest.approx(100 * M.ece(pf.confidence, pf.correct), abs=1e-9)
    # scoring the trained prompts on the full file reuses the same encoder
    assert run("eval", "--data", data, "--prompts", out / "prompts.csv", "--seed", 5,
               "-o", tmp_path / "ev") == 0
    full = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert full["n"] == 3 * 30


def test_sweep_cli(tmp_path):
    out = tmp_path / "s.csv"
    args = ["sweep", "--axis", "shots", "--values", "1,2", "--seeds", "0,1",
            "--classes", 3, "--train-per-class", 4, "--test-per-class", 10, "-o", out, *FAST]
    assert run(*args) == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "axis,value,seed,acc,ece,status"
    assert len(lines) == 5
    first = out.read_bytes()
    assert run(*args) == 0
    assert out.read_bytes() == first
    assert run("sweep", "--axis", "width", "--values", "1", "-o", out) == 2


def test_module_entry_point(tmp_path):
    env = dict(os.environ, CALIBBENCH_SEED="3")
    proc = subprocess.run(
        [sys.executable, "-m", "calibbench", "gen", "--classes", "2", "--dim", "4",
         "--train-per-class", "1", "--test-per-class", "1", "-o", str(tmp_path / "g.csv")],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0, proc.stderr
    assert D.load_embeddings(tmp_path / "g.csv").provenance["source"] == "file"
