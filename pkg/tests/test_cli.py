import json
import subprocess
import sys

import numpy as np
import pytest

from uniqcap.cli import main
from uniqcap.config import PipelineConfig, merge
from uniqcap.errors import InvalidInputError
from uniqcap.formats import read_tensor
from uniqcap.oracle import oracle_from_files
from uniqcap.surrogate import load_checkpoint, predict


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


# ---------------------------------------------------------------- config

def test_config_round_trip(tmp_path):
    cfg = merge(PipelineConfig(), {"seed": 5, "search.alpha": 2, "train.epochs": 40,
                                   "train.milestones": (24, 32), "synth": {"n_clips": 7}})
    path = tmp_path / "c.json"
    cfg.save(path)
    assert PipelineConfig.load(path) == cfg
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(InvalidInputError):
        merge(PipelineConfig(), {"nonsense": 1})
    with pytest.raises(InvalidInputError):
        merge(PipelineConfig(), {"search.alpha": 0})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(InvalidInputError):
        PipelineConfig.load(bad)


def test_sub_seeds():
    cfg = PipelineConfig(seed=1)
    names = ["generation", "init", "batching"]
    seeds = [cfg.sub_seed(n) for n in names]
    assert len(set(seeds)) == 3
    assert seeds == [PipelineConfig(seed=1).sub_seed(n) for n in names]
    assert cfg.sub_seed("init") != PipelineConfig(seed=2).sub_seed("init")


# ---------------------------------------------------------------- synth

def test_synth_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--seed", "1", "--out", str(tmp_path / d)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b
    oracle = oracle_from_files(tmp_path / "a" / "tensor.cdpt")
    assert oracle.shape == (10, 10, 10, 2)
    assert main(["synth", "--seed", "2", "--out", str(tmp_path / "c")]) == 0
    assert _files(tmp_path / "c")["tensor.cdpt"] != a["tensor.cdpt"]


def test_synth_inseparable_profile(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n-clips", "4", "--n-prompts", "3",
                 "--profile", "contains_inseparable"]) == 0
    gt = json.loads((tmp_path / "ground_truth.json").read_text())
    assert sum(not r["separable"] for r in gt["ground_truth"]) >= 1


def test_usage_errors(tmp_path, capsys):
    for argv in (["synth", "--profile", "bogus"], ["search", "--mode", "diagonal"],
                 ["search", "--alpha", "0", "--tensor", "x"], ["frobnicate"], ["search", "--out", str(tmp_path)]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub"), "--n-clips", "3", "--n-prompts", "2"]) == 1
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------- search

@pytest.fixture
def instance(tmp_path):
    out = tmp_path / "inst"
    assert main(["synth", "--out", str(out), "--seed", "4", "--n-clips", "6", "--n-prompts", "4",
                 "--n-advances", "2", "--dim", "32"]) == 0
    return out


def test_search_all_separable(instance, tmp_path, capsys):
    out = tmp_path / "s1"
    assert main(["search", "--tensor", str(instance / "tensor.cdpt"), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["unique_pct"] == 100.0 and summary["non_unique"] == 0
    assert "6 unique (100.0%)" in capsys.readouterr().out
    records = [json.loads(l) for l in (out / "assignments.jsonl").read_text().splitlines()]
    assert len(records) == 6 and all(r["unique"] and r["caption"] for r in records)
    assert 1 <= summary["mean_elements"] <= 3

    again = tmp_path / "s2"
    assert main(["search", "--tensor", str(instance / "tensor.cdpt"), "--out", str(again)]) == 0
    assert _files(out) == _files(again)


def test_search_high_lambda(instance, tmp_path):
    out = tmp_path / "s"
    assert main(["search", "--tensor", str(instance / "tensor.cdpt"), "--out", str(out),
                 "--lambda", "5", "--tau-max", "1", "--mode", "per-clip"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["unique"] == 0 and summary["exhausted"] == 6
    records = [json.loads(l) for l in (out / "assignments.jsonl").read_text().splitlines()]
    assert all(r["advance_used"] <= 1 for r in records)


def test_search_missing_input(tmp_path, capsys):
    missing = tmp_path / "none.cdpt"
    assert main(["search", "--tensor", str(missing), "--out", str(tmp_path)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_config_file_layering(instance, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"search": {"lam": 5.0, "alpha": 2}}))
    out = tmp_path / "s"
    assert main(["search", "--config", str(cfg), "--tensor", str(instance / "tensor.cdpt"),
                 "--out", str(out), "--alpha", "1"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["search"]["lambda"] == 5.0  # from file
    assert summary["search"]["alpha"] == 1  # flag beats file


# ---------------------------------------------------------------- train, eval, verify

TRAIN_FLAGS = ["--epochs", "30", "--lr", "1e-3", "--model-dim", "32", "--ff-dim", "64"]


def test_train_and_surrogate_search(instance, tmp_path):
    out = tmp_path / "m"
    assert main(["train-surrogate", "--tensor", str(instance / "tensor.cdpt"),
                 "--embeddings", str(instance / "embeddings.cdpe"), "--out", str(out)] + TRAIN_FLAGS) == 0
    trace = json.loads((out / "losses.json").read_text())
    assert len(trace["epoch_loss"]) == 30 and np.all(np.isfinite(trace["epoch_loss"]))
    model = load_checkpoint(out / "model.cdpn")
    again = load_checkpoint(out / "model.cdpn")
    x = np.eye(2, 32, dtype=np.float32)
    assert predict(model, x[0], x[1], 1) == predict(again, x[0], x[1], 1)

    s = tmp_path / "s"
    assert main(["search", "--tensor", str(instance / "tensor.cdpt"), "--embeddings",
                 str(instance / "embeddings.cdpe"), "--model", str(out / "model.cdpn"), "--out", str(s)]) == 0
    summary = json.loads((s / "summary.json").read_text())
    assert summary["provenance"] == "surrogate"
    assert summary["verification"]["checked"] == 6
    # a 30-epoch model is far from converged; discrepancies must be reported, not hidden
    assert isinstance(summary["verification"]["discrepancies"], list)


def test_eval_perfect_assignments(instance, tmp_path):
    s = tmp_path / "s"
    assert main(["search", "--tensor", str(instance / "tensor.cdpt"), "--out", str(s)]) == 0
    e = tmp_path / "e"
    assert main(["eval", "--tensor", str(instance / "tensor.cdpt"),
                 "--assignments", str(s / "assignments.jsonl"), "--out", str(e)]) == 0
    report = json.loads((e / "report.json").read_text())
    assert report["cycle1"] == 100.0 and report["avg_r1"] == 100.0


def test_eval_with_sets(instance, tmp_path):
    s = tmp_path / "s"
    main(["search", "--tensor", str(instance / "tensor.cdpt"), "--out", str(s)])
    sets = tmp_path / "sets.json"
    sets.write_text(json.dumps([["clip0", "clip1", "clip2"], ["clip3", "clip4", "clip5"]]))
    e = tmp_path / "e"
    assert main(["eval", "--tensor", str(instance / "tensor.cdpt"), "--assignments",
                 str(s / "assignments.jsonl"), "--sets", str(sets), "--out", str(e)]) == 0
    report = json.loads((e / "report.json").read_text())
    assert report["n_sets"] == 2 and len(report["per_set"]) == 2


def test_eval_chance_harness(tmp_path, capsys):
    assert main(["eval", "--chance-trials", "10000", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert abs(report["avg_r1"] - 10) < 0.7 and abs(report["cycle1"] - 1.0) < 0.3
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--chance-trials", "10", "--set-sizes", "a,b", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_bench(capsys):
    assert main(["bench", "--n-clips", "40", "--repeats", "1"]) == 0
    out = capsys.readouterr().out
    assert "backend=compiled" in out and "backend=python" in out


# ---------------------------------------------------------------- pipeline

def test_pipeline_deterministic(tmp_path):
    argv = ["run", "--seed", "3", "--n-clips", "5", "--n-prompts", "3", "--n-advances", "2",
            "--dim", "32", "--profile", "requires_advance", "--tau-max", "1", "--surrogate"] + TRAIN_FLAGS
    assert main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) >= {"config.json", "tensor.cdpt", "model.cdpn", "assignments.jsonl", "report.json"}
    assert a == b
    cfg = PipelineConfig.load(tmp_path / "a" / "config.json")
    assert cfg.seed == 3 and cfg.train.epochs == 30


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "uniqcap.cli", "synth", "--profile", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and "invalid choice" in proc.stderr
