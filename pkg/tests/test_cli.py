import json

import pytest

from averis_lab.cli import run
from averis_lab.decomposition import anisotropic_activations
from averis_lab.tensorio import write_tensor


@pytest.fixture
def acts(tmp_path):
    p = tmp_path / "x.avts"
    write_tensor(p, anisotropic_activations(l=128, m=200, seed=1))
    return p


def report(path):
    return json.loads(path.read_text(encoding="utf-8"))


def test_decompose_auto_rank(tmp_path, acts, capsys):
    out = tmp_path / "r.json"
    assert run(["decompose", "--input", str(acts), "--k", "auto", "--out", str(out)]) == 0
    rep = report(out)
    assert rep["report"]["k"] == 2 and rep["status"] == "ok"
    assert capsys.readouterr().out.startswith("config: {")


def test_identical_argv_gives_identical_reports(tmp_path, acts):
    out = tmp_path / "a.json"
    argv = ["attribute", "--input", str(acts), "--no-timestamp", "--out", str(out)]
    assert run(argv) == 0
    first = out.read_bytes()
    assert run(argv) == 0
    assert out.read_bytes() == first
    assert "timestamp" not in report(out)


def test_timestamp_present_by_default(tmp_path, acts):
    out = tmp_path / "d.json"
    run(["diagnose", "--input", str(acts), "--out", str(out)])
    assert "timestamp" in report(out)


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("AVERIS_SEED", "17")
    out = tmp_path / "z.json"
    assert run(["zipf-demo", "--out", str(out)]) == 0
    assert report(out)["config"]["seed"] == 17


def test_csv_output(tmp_path):
    out = tmp_path / "s.csv"
    assert run(["scaling-check", "--format", "csv", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "h,mean_norm" and len(lines) == 5


def test_train_writes_loss_csv(tmp_path):
    out = tmp_path / "t.csv"
    argv = ["train", "--steps", "5", "--hidden", "16", "--batch", "2", "--seq", "8", "--format", "csv", "--out", str(out)]
    assert run(argv) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 6


def test_quant_error_report(tmp_path):
    out = tmp_path / "q.json"
    assert run(["quant-error", "--l", "64", "--m", "32", "--n", "16", "--out", str(out)]) == 0
    rep = report(out)["report"]
    assert rep["averis_error"] > 0 and rep["vanilla_error"] > 0


def test_noiseless_scaling_check_passes(tmp_path):
    out = tmp_path / "s.json"
    assert run(["scaling-check", "--mu-bar", "1.0", "--sigma", "0", "--out", str(out)]) == 0
    assert report(out)["report"]["slope"] == pytest.approx(0.5, abs=1e-12)


def test_verify_theorems_corrected_quantile_passes():
    assert run(["verify-theorems", "--trials", "20000", "--count-trials", "200", "--shift-quantile", "corrected"]) == 0


def test_verify_theorems_stated_quantile_fails(capsys):
    assert run(["verify-theorems", "--trials", "20000", "--count-trials", "200"]) == 1
    assert "NO" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [["bogus"], ["decompose", "--nope"], ["decompose", "--k", "zero"], [], ["decompose", "--input", "/no/such.avts"]],
)
def test_usage_and_io_errors_exit_two(argv):
    assert run(argv) == 2


def test_bad_file_exits_two(tmp_path):
    p = tmp_path / "bad.avts"
    p.write_bytes(b"XXXX" + bytes(20))
    assert run(["decompose", "--input", str(p)]) == 2


def test_help_exits_zero():
    assert run(["--help"]) == 0
