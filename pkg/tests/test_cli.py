import json
import os
import subprocess
import sys

import pytest

from otbb.cli import parse_measure, run

FAST = ["--tol", "1e-5", "--no-figures"]


def test_converge_writes_relative_errors(tmp_path):
    out = tmp_path / "results" / "conv.csv"
    code = run(["converge", "--model", "fv", "--dim", "1", "--domain", "0,2", "--cells", "64",
                "--N", "32", "--rho0", "uniform:0,1", "--rho1", "uniform:0.5,1.5",
                "--oracle", "quantile", "--out", str(out)])
    assert code == 0
    header, row = out.read_text().splitlines()[:2]
    cols = header.split(",")
    assert "rel_error" in cols
    assert float(row.split(",")[cols.index("rel_error")]) <= 0.05
    summary = json.loads(out.with_suffix(".json").read_text())
    assert "metadata" in summary
    assert list(out.parent.glob("conv_*.png"))


def test_verify_a4_prints_residual(capsys):
    assert run(["verify", "--assumption", "A4", "--model", "fv", "--dim", "1", "--cells", "16"]) == 0
    assert "e-" in capsys.readouterr().out


def test_missing_spec_is_invalid(tmp_path):
    assert run(["solve", "--spec", str(tmp_path / "missing.json")]) == 2


def test_unknown_flag_and_spec_field(tmp_path):
    assert run(["solve", "--bogus"]) == 2
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"mode": "solve", "colour": "red"}))
    assert run(["solve", "--spec", str(spec)]) == 2
    spec.write_text(json.dumps({"mode": "verify"}))
    assert run(["solve", "--spec", str(spec)]) == 2


def test_measure_inputs(tmp_path):
    code = run(["solve", "--cells", "8", "--domain", "0,1", "--rho0", "uniform:0,0.5",
                "--rho1", "dirac:0.7", "--out", str(tmp_path / "x.csv"), *FAST])
    assert code == 0
    code = run(["solve", "--cells", "8", "--domain", "0,1", "--rho0", "uniform:0,0.5",
                "--rho1", "dirac:0.7,0.2", *FAST])
    assert code == 2
    code = run(["solve", "--cells", "8", "--domain", "0,1", "--rho0", "file:" + str(tmp_path / "none.json"),
                "--rho1", "dirac:0.7", *FAST])
    assert code == 2


def test_not_converged_exit_code(tmp_path):
    code = run(["solve", "--cells", "16", "--domain", "0,2", "--rho0", "uniform:0,1",
                "--rho1", "uniform:1,2", "--N", "8", "--max-iter", "3", "--out",
                str(tmp_path / "x.csv"), "--no-figures"])
    assert code == 3


def test_spec_file_drives_solve(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"mode": "solve", "model": "fv", "domain": [0, 2], "cells": 16,
                                "N": 4, "rho0": "uniform:0,1", "rho1": "uniform:0.5,1.5",
                                "solver": {"tol": 1e-5}}))
    out = tmp_path / "path.csv"
    assert run(["solve", "--spec", str(spec), "--out", str(out), "--no-figures"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("k,")
    assert len(lines) == 1 + 5 * 16


def test_jobs_do_not_change_csv(tmp_path):
    args = ["converge", "--domain", "0,2", "--cells", "16,32", "--N", "4,8", "--rho0", "uniform:0,1",
            "--rho1", "uniform:0.5,1.5", *FAST]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(args + ["--out", str(a), "--jobs", "1"]) == 0
    assert run(args + ["--out", str(b), "--jobs", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_jko_and_mesh_report(tmp_path, capsys):
    assert run(["jko", "--domain=-0.5,1.5", "--cells", "34", "--N", "8", "--rho0", "dirac:0",
                "--out", str(tmp_path / "j.csv"), *FAST]) == 0
    assert run(["mesh-report", "--model", "tri", "--surface", "sphere", "--subdiv", "2",
                "--json", str(tmp_path / "m.json"), "--no-figures"]) == 0
    rep = json.loads((tmp_path / "m.json").read_text())
    assert rep["vertices"] == 162 and rep["components"] == 1


def test_parse_measure_forms(tmp_path):
    assert parse_measure("dirac:0.5,0.25").mass() == pytest.approx(1.0)
    assert parse_measure("uniform:0,2").mass() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        parse_measure("gaussian:0,1")


def test_console_script_help():
    exe = os.path.join(os.path.dirname(sys.executable), "otbb")
    cmd = [exe] if os.path.exists(exe) else [sys.executable, "-m", "otbb.cli"]
    res = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "converge" in res.stdout
