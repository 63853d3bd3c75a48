import json
import subprocess
import sys

import pytest

from fedtune.cli import EXIT_BUDGET, EXIT_IO, EXIT_OK, EXIT_SPEC, _values, main

SURROGATE = ["--backend", "surrogate", "--n-val", "20", "--seed", "2"]


def test_values_parsing():
    assert _values("1,10,full") == [1, 10, "full"]
    assert _values("0.5, inf") == [0.5, "inf"]
    assert _values("3.0") == [3.0]


def test_sweep_and_report(tmp_path, capsys):
    out = tmp_path / "sweep"
    args = ["sweep", *SURROGATE, "--out", str(out), "--subsample", "1,full", "--trials", "4",
            "--k", "8", "--pool-size", "16"]
    assert main(args) == EXIT_OK
    assert len(capsys.readouterr().out.splitlines()) == 2
    summary = (out / "summary.csv").read_bytes()
    (out / "summary.csv").unlink()
    assert main(["report", "--out", str(out)]) == EXIT_OK
    assert (out / "summary.csv").read_bytes() == summary


def test_bootstrap_is_rs_sweep(tmp_path):
    assert main(["bootstrap", *SURROGATE, "--out", str(tmp_path), "--trials", "2", "--pool-size", "16"]) == EXIT_OK
    assert json.loads((tmp_path / "spec.json").read_text())["tuner"] == "RS"


def test_tune_writes_trace(tmp_path):
    args = ["tune", *SURROGATE, "--out", str(tmp_path), "--tuner", "HB", "--subsample", "1", "--epsilon", "100"]
    assert main(args) == EXIT_OK
    trace = json.loads((tmp_path / "trace.json").read_text())
    assert trace["tuner"] == "Hyperband" and trace["rounds_consumed"] <= 6480


def test_tune_rejects_grids(tmp_path):
    assert main(["tune", *SURROGATE, "--out", str(tmp_path), "--subsample", "1,2"]) == EXIT_SPEC


def test_proxy_outputs(tmp_path):
    args = ["proxy", *SURROGATE, "--out", str(tmp_path), "--optimum-shift", "far_corner", "--scatter-size", "6"]
    assert main(args) == EXIT_OK
    result = json.loads((tmp_path / "proxy.json").read_text())
    assert {"config_id", "config", "target_error", "spearman"} <= set(result)
    assert len((tmp_path / "scatter.csv").read_text().splitlines()) == 7
    assert len((tmp_path / "scatter_configs.jsonl").read_text().splitlines()) == 6


def test_proxy_rotation_needs_fedtrain(tmp_path):
    assert main(["proxy", *SURROGATE, "--out", str(tmp_path), "--rotation", "0.3"]) == EXIT_SPEC


def test_spec_file_with_override(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"backend": "surrogate", "trials": 2, "pool_size": 16, "k": 4,
                                "grid": {"subsample": ["full"]}}))
    assert main(["sweep", "--spec", str(spec), "--trials", "3", "--out", str(tmp_path / "o")]) == EXIT_OK
    assert json.loads((tmp_path / "o" / "spec.json").read_text())["trials"] == 3


def test_exit_codes(tmp_path, capsys):
    assert main(["sweep", *SURROGATE, "--out", str(tmp_path / "a"), "--subsample", "500"]) == EXIT_SPEC
    assert not (tmp_path / "a").exists()
    assert main(["tune", *SURROGATE, "--out", str(tmp_path / "b"), "--k", "17"]) == EXIT_BUDGET
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["sweep", *SURROGATE, "--out", str(blocker / "c"), "--trials", "1"]) == EXIT_IO
    assert main(["report", "--out", str(tmp_path / "missing")]) == EXIT_SPEC
    assert main(["frobnicate"]) == EXIT_SPEC
    assert main(["--help"]) == EXIT_OK
    capsys.readouterr()


def test_pool_command(tmp_path):
    args = ["pool", "--n-train", "10", "--n-val", "5", "--pool-size", "3", "--out", str(tmp_path)]
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"rounds": 15, "k": 3, "workload": {"samples_per_client": 10}}))
    assert main([*args, "--spec", str(spec)]) == EXIT_OK
    assert len((tmp_path / "pool" / "full_errors.csv").read_text().splitlines()) == 4


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fedtune.cli", "report", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_SPEC and "spec error" in proc.stderr
