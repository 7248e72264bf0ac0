import json
import os
import subprocess
import sys

import pytest

from irmcal.cli import run_cli

TWOBIT = ["--set", "dataset.name=twobit", "--set", "dataset.n_per_env=300", "--set", "harness.max_steps=30",
          "--set", "harness.eval_interval=10"]


def test_help_exits_zero(capsys):
    assert run_cli(["--help"]) == 0
    out = capsys.readouterr().out
    for verb in ("fetch-data", "gen-data", "train", "sweep", "replicate", "report"):
        assert verb in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "irmcal.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("irmcal ")


def test_no_verb_is_usage_error(capsys):
    assert run_cli([]) == 2


def test_missing_config(capsys):
    assert run_cli(["train", "--config", "missing.cfg"]) == 2
    assert "file not found" in capsys.readouterr().err


@pytest.mark.parametrize("args", [["train", "--set", "method.lamb=1"], ["train", "--set", "nodot=1"],
                                  ["sweep", "--grid", "method.lam"], ["replicate", "fig3", "--config", "x.toml"],
                                  ["replicate", "fig99"]])
def test_bad_arguments(args, capsys):
    assert run_cli(args) == 2


def test_train_then_report(tmp_path, capsys):
    out = tmp_path / "train"
    assert run_cli(["-q", "train", *TWOBIT, "--seed", "4", "--out", str(out)]) == 0
    runs = os.listdir(out / "runs")
    assert len(runs) == 1 and runs[0].endswith("-s4")
    assert (out / "report.csv").exists() and (out / "plots" / "trajectory.csv").exists()
    capsys.readouterr()
    combined = tmp_path / "all.csv"
    assert run_cli(["report", str(out), "--out", str(combined)]) == 0
    assert runs[0] in capsys.readouterr().out
    assert combined.read_text() == (out / "report.csv").read_text()


def test_report_on_empty_dir(tmp_path):
    assert run_cli(["report", str(tmp_path)]) == 2


def test_sweep_writes_selection(tmp_path, capsys):
    out = tmp_path / "sweep"
    code = run_cli(["-q", "sweep", *TWOBIT, "--set", "harness.seeds=[0]", "--set", "method.name=IRMv1",
                    "--grid", "method.lam=[1.0, 100.0]", "--out", str(out)])
    assert code == 0
    doc = json.loads((out / "sweep.json").read_text())
    assert [c["params"]["method.lam"] for c in doc["cells"]] == [1.0, 100.0]
    assert doc["selection"] == "oracle_test_acc" and doc["best"] is not None
    assert (out / "plots" / "sweep.csv").exists()


def test_gen_data_cache(tmp_path):
    out = tmp_path / "envs"
    assert run_cli(["-q", "gen-data", *TWOBIT, "--set", "harness.seeds=[0, 1]", "--out", str(out)]) == 0
    assert len(list(out.glob("twobit-*-s*.npz"))) == 2


def test_fetch_from_local_mirror(tmp_path, mnist_dir):
    dest = tmp_path / "mnist"
    assert run_cli(["-q", "fetch-data", "--url", "file://" + os.path.abspath(mnist_dir), "--out", str(dest)]) == 0
    assert len(list(dest.glob("*.gz"))) == 4


def test_fetch_failure_is_runtime_error(tmp_path):
    assert run_cli(["-q", "fetch-data", "--url", "file://" + str(tmp_path / "nowhere"),
                    "--out", str(tmp_path / "d")]) == 3
