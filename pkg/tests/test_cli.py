import json

import pytest

from actmem.cli import main
from actmem.config import RunConfig, load_config, parse_config
from actmem.errors import ConfigFileError
from actmem.gelu_fit import load_table


class TestConfig:
    def test_parse(self):
        cfg = parse_config("# toy\nH = 64\nA=4\n\nS = 16  # tokens\np = 0.0\ntable_path = /tmp/t.txt\n")
        assert (cfg.H, cfg.A, cfg.S, cfg.p, cfg.table_path) == (64, 4, 16, 0.0, "/tmp/t.txt")
        assert cfg.B == RunConfig().B

    @pytest.mark.parametrize("text, match", [
        ("Z = 1", "unknown key"),
        ("H 64", "key = value"),
        ("H = sixty", "bad value"),
        ("H = 8\nH = 16", "duplicate"),
        ("H = 10\nA = 4", "divisible"),
    ])
    def test_errors(self, text, match):
        with pytest.raises(ConfigFileError, match=match):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigFileError):
            load_config(tmp_path / "nope.cfg")

    def test_encoder_config(self):
        assert parse_config("L = 3").encoder_config().L == 3


def test_memory_report_json(capsys):
    assert main(["memory-report", "--H", "768", "--A", "12", "--S", "128", "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["per_token_bytes"] == 70656


def test_memory_report_text(capsys):
    assert main(["memory-report", "--H", "768", "--A", "12", "--S", "512"]) == 0
    assert "56.47%" in capsys.readouterr().out


def test_fit_gelu(tmp_path, capsys):
    out = tmp_path / "table.txt"
    assert main(["fit-gelu", "--tol", "1e-3", "--samples", "20000", "--out", str(out)]) == 0
    assert load_table(out).verified_max_error <= 1e-3
    assert "max error" in capsys.readouterr().out


def test_fit_gelu_unreachable_exits_one(capsys):
    assert main(["fit-gelu", "--tol", "1e-14", "--max-degree", "1", "--samples", "100"]) == 1
    assert "error:" in capsys.readouterr().err


def test_gradcheck_small(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("H = 8\nA = 2\nS = 3\nB = 1\n")
    assert main(["gradcheck", "--trials", "1", "--config", str(cfg), "--format", "csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "case,input,worst_error,tolerance,passed"
    assert all(line.endswith(",1") for line in lines[1:])


def test_gradcheck_bad_config_exits_one(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("depth = 3\n")
    assert main(["gradcheck", "--config", str(cfg)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_train_csv(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("H = 8\nA = 2\nS = 3\nB = 1\n")
    assert main(["train", "--variant", "tempo", "--steps", "3", "--config", str(cfg), "--format", "csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "step,loss,peak_bytes,transient_bytes,seconds" and len(lines) == 4


def test_bench_text(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("H = 8\nA = 2\nS = 3\nB = 1\n")
    assert main(["bench", "--reps", "1", "--config", str(cfg)]) == 0
    assert "throughput ratio" in capsys.readouterr().out


def test_bench_zero_reps_exits_one(capsys):
    assert main(["bench", "--reps", "0"]) == 1
