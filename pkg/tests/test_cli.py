import json
import subprocess
import sys

import pytest

from streamcap.cli import main
from streamcap.config import ConfigOverrideError, RunConfig, apply_overrides


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_data_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run("synth-data", "--seed", 7, "--count", 100, "-o", a) == 0
    assert run("synth-data", "--seed", 7, "--count", 100, "-o", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_eval_ground_truth_as_prediction(tmp_path, capsys):
    d = tmp_path / "d.jsonl"
    run("synth-data", "--seed", 1, "--count", 12, "-o", d)
    capsys.readouterr()
    assert run("eval", "--pred", d, "--data", d, "--out", tmp_path / "rep") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["mean_f1"] == 1.0 and out["soda"] == 1.0
    for name in ("metrics.json", "metrics.tsv", "f1_thresholds.png"):
        assert (tmp_path / "rep" / name).stat().st_size > 0


def test_flops_table(tmp_path, capsys):
    assert run("flops", "--preset", "large-8seg", "--out", tmp_path) == 0
    text = capsys.readouterr().out
    header, row = text.splitlines()[:2]
    assert header.split()[1:] == ["Global", "Factorized", "Savings"]
    assert row.startswith("large-8seg") and row.endswith("%")
    assert (tmp_path / "flops.tsv").exists() and (tmp_path / "savings_vs_T.png").exists()


def test_usage_errors_exit_1(capsys):
    assert run("synth-data", "--bogus") == 1
    assert "usage" in capsys.readouterr().err
    assert run() == 1
    assert run("eval", "--pred", "x") == 1


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"id": "v9", "duration": 5, "features": [[0.0]], "events": [{"start": 3, "end": 1, "caption": "x"}]}) + "\n")
    assert run("inspect", bad) == 2
    assert "v9" in capsys.readouterr().err
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run("inspect", empty) == 2
    assert "no records" in capsys.readouterr().err
    assert run("eval", "--pred", tmp_path / "missing.jsonl", "--data", bad) == 2


def test_inspect_valid_dataset(tmp_path, capsys):
    d = tmp_path / "d.jsonl"
    run("synth-data", "--count", 5, "-o", d)
    capsys.readouterr()
    assert run("inspect", d) == 0
    assert json.loads(capsys.readouterr().out)["videos"] == 5


def test_train_infer_eval_round_trip(tmp_path, capsys):
    d, r = tmp_path / "d.jsonl", tmp_path / "run"
    run("synth-data", "--count", 6, "-o", d)
    code = run("train", "--data", d, "--out", r, "--steps", 3, "--set", "train.batch_size=2",
               "--set", "model.d_model=32", "--set", "train.warmup_steps=1")
    assert code == 0
    for name in ("model.json", "model.bin", "vocab.json", "run_config.json", "train_log.jsonl", "loss_curve.png"):
        assert (r / name).exists()
    cfg = RunConfig.load(r / "run_config.json")
    assert cfg.model.d_model == 32 and cfg.train.steps == 3 and cfg.paths.dataset == str(d)
    p = tmp_path / "p.jsonl"
    assert run("infer", "--run", r, "--data", d, "-o", p, "--preset", "greedy") == 0
    assert json.loads((tmp_path / "p.jsonl.summary.json").read_text())["videos"] == 6
    for line in p.read_text().splitlines():
        rec = json.loads(line)
        assert rec["format_version"] == 1 and rec["start"] <= rec["end"]
    assert run("eval", "--pred", p, "--data", d) == 0
    capsys.readouterr()
    assert run("inspect", r) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["parameters_total"] == sum(info["parameters_by_module"].values())


def test_overrides():
    cfg = apply_overrides(RunConfig(), ["model.d_model=96", "codec.time_mode=absolute", "seed=4"])
    assert cfg.model.d_model == 96 and cfg.codec.time_mode == "absolute" and cfg.seed == 4
    with pytest.raises(ConfigOverrideError):
        apply_overrides(RunConfig(), ["model.nope=1"])
    with pytest.raises(ConfigOverrideError):
        apply_overrides(RunConfig(), ["model.d_model"])
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_bad_override_is_usage_error(tmp_path, capsys):
    assert run("synth-data", "-o", tmp_path / "x.jsonl", "--set", "synth.colour=red") == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "streamcap", "flops", "--preset", "tiny"], capture_output=True, text=True)
    assert out.returncode == 0 and "tiny" in out.stdout
