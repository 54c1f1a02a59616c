import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from fgrad.cli import _parse_lrs, main
from fgrad.config import ConfigError, load_config, resolve
from fgrad.runner import csv_header

SYNTH = {
    "model": {"preset": "micro4", "aux_kind": "cnn", "h_chan": 3, "n_depth": 2},
    "estimator": {"guess": "local", "target": "global", "space": "weight"},
    "optim": {"lr": 0.05},
    "data": {"dataset": "synth", "synth": {"classes": 4, "shape": [1, 8, 8], "count": 64}},
    "run": {"epochs": 2, "batch_size": 32, "seed": 0},
}


def write_cfg(tmp_path, cfg, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def run_train(tmp_path, cfg, out):
    return main(["train", str(write_cfg(tmp_path, cfg)), "--out-dir", str(out)])


def test_train_writes_all_sinks(tmp_path, capsys):
    out = tmp_path / "run"
    assert run_train(tmp_path, SYNTH, out) == 0
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    recs = [json.loads(l) for l in lines]
    assert [r["epoch"] for r in recs] == [1, 2]
    assert all(len(r["cos_activity"]) == 4 for r in recs)
    with open(out / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == csv_header(4) and len(rows) == 3
    progress = capsys.readouterr().out.splitlines()
    assert len(progress) == 2 and progress[0].startswith("epoch=1 loss=") and " acc=" in progress[0]


def test_tiny8_config_contract(tmp_path):
    cfg = {**SYNTH, "model": {"preset": "tiny8", "aux_kind": "linear"},
           "data": {"dataset": "synth", "synth": {"classes": 10, "shape": [1, 16, 16], "count": 40}},
           "run": {"epochs": 1, "batch_size": 20, "seed": 0, "diagnostics": "off"}}
    out = tmp_path / "tiny8"
    assert run_train(tmp_path, cfg, out) == 0
    rec = json.loads((out / "metrics.jsonl").read_text())
    assert len(rec["local_train_loss"]) == 8


def test_same_config_twice_is_byte_identical_and_echo_reproduces(tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert run_train(tmp_path, SYNTH, a) == 0
    assert run_train(tmp_path, SYNTH, b) == 0
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert main(["train", str(a / "config.resolved"), "--out-dir", str(c)]) == 0
    assert (a / "metrics.jsonl").read_bytes() == (c / "metrics.jsonl").read_bytes()
    assert load_config(a / "config.resolved")["run"]["out_dir"] == str(a)


def test_validation_errors_are_one_line(tmp_path, capsys):
    bad = {**SYNTH, "estimator": {"guess": "gaussian", "space": "activity", "span_projection": True}}
    assert run_train(tmp_path, bad, tmp_path / "x") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: config:") and "span_projection" in err[0]
    assert run_train(tmp_path, {**SYNTH, "model": {"preset": "tiny8", "colour": 1}}, tmp_path / "y") == 2
    assert "colour" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("FGRAD_DATA_ROOT", raising=False)
    cfg = {**SYNTH, "data": {"dataset": "mnist"}}
    assert run_train(tmp_path, cfg, tmp_path / "z") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FileNotFoundError:")


def test_config_enums_and_keys():
    with pytest.raises(ConfigError):
        resolve({"estimator": {"guess": "orthogonal"}})
    with pytest.raises(ConfigError):
        resolve({"run": {"epochs": -1}})
    with pytest.raises(ConfigError):
        resolve({"data": {"augment": {"rotate": 5}}})
    with pytest.raises(ConfigError):
        resolve({"optim": {"schedule": {"decay_factor": 0.2, "every": 3}}})
    cfg = resolve({"estimator": {"guess": "gaussian"}})
    assert cfg["run"]["aux_training"] == "detached_logging"
    assert cfg["model"]["split"] == "residual"
    assert resolve({"model": {"preset": "tiny16"}})["model"]["skip"] is False


def test_gradcheck_passes_and_mutation_fails(capsys):
    assert main(["gradcheck", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "adjoint conv2d" in out
    for line in out.splitlines():
        if line.startswith("adjoint"):
            assert float(line.split("err=")[1].split()[0]) <= 1e-10
    assert main(["gradcheck", "--quick", "--inject-sign-flip", "relu"]) == 1
    out = capsys.readouterr().out
    assert any(l.startswith("adjoint relu") and l.endswith("FAIL") for l in out.splitlines())


def parse_ratio(out):
    line = [l for l in out.splitlines() if l.startswith("relative_second_moment")][0]
    return float(line.split("=")[1].split()[0])


@pytest.mark.parametrize("family,expected", [("rademacher", 15.0), ("gaussian", 17.0)])
def test_estimator_stats(capsys, family, expected):
    assert main(["estimator-stats", "--dim", "16", "--family", family, "--draws", "20000", "--seed", "0"]) == 0
    assert parse_ratio(capsys.readouterr().out) == pytest.approx(expected, rel=0.10)


def test_estimator_stats_dim_one_and_errors(capsys):
    assert main(["estimator-stats", "--dim", "1", "--family", "rademacher", "--draws", "50"]) == 0
    assert parse_ratio(capsys.readouterr().out) == 0.0
    assert main(["estimator-stats", "--dim", "0", "--family", "gaussian"]) == 2


def test_grid(tmp_path, caplog):
    cfg = {**SYNTH, "run": {"epochs": 1, "batch_size": 32, "seed": 5}}
    out = tmp_path / "grid"
    assert main(["grid", str(write_cfg(tmp_path, cfg)), "--lrs", "0.05,0.01,0.05,0.005", "--out-dir", str(out)]) == 0
    assert "duplicate lr 0.05 ignored" in caplog.text
    with open(out / "grid.csv") as f:
        rows = list(csv.DictReader(f))
    assert [r["lr"] for r in rows] == ["0.05", "0.01", "0.005"]
    assert [int(r["seed"]) for r in rows] == [5, 6, 7]
    for r in rows:
        assert (out / f"lr_{r['lr']}" / "metrics.jsonl").exists()
    accs = [float(r["final_test_acc"]) for r in rows]
    assert [int(r["best"]) for r in rows].index(1) == int(np.argmax(accs))


def test_grid_records_failed_runs(tmp_path, monkeypatch):
    import fgrad.cli as cli
    real = cli.execute

    def flaky(cfg, *a, **k):
        if cfg["optim"]["lr"] == 0.01:
            raise FloatingPointError("diverged")
        return real(cfg, *a, **k)

    monkeypatch.setattr(cli, "execute", flaky)
    cfg = {**SYNTH, "run": {"epochs": 1, "batch_size": 32, "seed": 0}}
    out = tmp_path / "g"
    assert main(["grid", str(write_cfg(tmp_path, cfg)), "--lrs", "0.05,0.01,0.005", "--out-dir", str(out)]) == 1
    with open(out / "grid.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3
    assert rows[1]["status"].startswith("error: FloatingPointError") and rows[1]["best"] == "0"
    assert rows[0]["status"] == rows[2]["status"] == "ok"
    assert main(["grid", str(write_cfg(tmp_path, cfg)), "--lrs", " , ", "--out-dir", str(out)]) == 2
    with pytest.raises(ValueError):
        _parse_lrs("")


def test_checksums_command(tmp_path, capsys):
    (tmp_path / "mnist").mkdir()
    assert main(["checksums", "mnist", "--root", str(tmp_path)]) == 1
    assert capsys.readouterr().out.count("MISSING") == 4


def test_console_script_help():
    r = subprocess.run([sys.executable, "-m", "fgrad.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "gradcheck", "estimator-stats", "grid", "checksums"):
        assert cmd in r.stdout
