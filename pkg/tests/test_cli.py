import csv
import filecmp
import hashlib
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ncimpute.cli import main
from ncimpute.dof import df_montecarlo
from ncimpute.penalty import PenaltySpec
from conftest import ml100k_path

SURFACE_HEADER = ("lambda,gamma,rank,objective,train_err,test_err,outer_iters,"
                  "delta_final,stationarity_residual,wall_time_s")


def _digest(directory: Path) -> dict:
    return {p.relative_to(directory).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture
def instance(tmp_path):
    out = tmp_path / "inst"
    assert main(["simulate", "--regime", "rom", "--m", "20", "--n", "15", "--rank", "2",
                 "--snr", "5", "--miss", "0.5", "--seed", "7", "--out", str(out)]) == 0
    return out


def test_simulate_is_deterministic(tmp_path):
    args = ["simulate", "--regime", "rom", "--m", "200", "--n", "100", "--rank", "5",
            "--snr", "5", "--miss", "0.8", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = _digest(tmp_path / "a")
    assert {"train.csv", "test.csv", "meta.json", "truth/header.txt"} <= set(a)
    assert a == _digest(tmp_path / "b")
    assert len((tmp_path / "a" / "train.csv").read_text().splitlines()) == 4000


def test_seed_before_or_after_subcommand(tmp_path):
    base = ["--regime", "coherent", "--m", "20", "--n", "10", "--rank", "5", "--snr", "1", "--miss", "0.5"]
    assert main(["--seed", "4", "simulate", *base, "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", *base, "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    assert main(["simulate", *base, "--out", str(tmp_path / "c")]) == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_surface_rows_header_and_determinism(instance, tmp_path, capsys):
    args = ["surface", "--train", str(instance / "train.csv"), "--test", str(instance / "test.csv"),
            "--n-lambda", "5", "--gammas", "10,2", "--no-timing"]
    before = _digest(instance)
    assert main(args + ["--out", str(tmp_path / "s1.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "s2.csv")]) == 0
    assert filecmp.cmp(tmp_path / "s1.csv", tmp_path / "s2.csv", shallow=False)
    lines = (tmp_path / "s1.csv").read_text().splitlines()
    assert lines[0] == SURFACE_HEADER
    assert len(lines) == 1 + 5 * 3
    assert _digest(instance) == before
    assert "best" in capsys.readouterr().out


def test_surface_default_grid_size(instance, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["surface", "--train", str(instance / "train.csv"), "--test", str(instance / "test.csv"),
                 "--max-iters", "1", "--no-timing", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 100 * 26
    gammas = sorted({float(r["gamma"]) for r in rows}, reverse=True)
    assert gammas[0] == float("inf") and gammas[1] == pytest.approx(5000) and gammas[-1] == pytest.approx(1.1)
    lams = [float(r["lambda"]) for r in rows[:100]]
    assert lams[-1] == pytest.approx(1e-3 * lams[0])


def test_surface_save_factors(instance, tmp_path):
    fac = tmp_path / "factors"
    assert main(["surface", "--train", str(instance / "train.csv"), "--n-lambda", "2", "--gammas", "5",
                 "--save-factors", str(fac), "--out", str(tmp_path / "s.csv")]) == 0
    dirs = sorted(p.name for p in fac.iterdir())
    assert len(dirs) == 4 and all(d.startswith("cell_") for d in dirs)


def test_fit_writes_one_row(instance, tmp_path):
    out = tmp_path / "f.csv"
    assert main(["fit", "--train", str(instance / "train.csv"), "--test", str(instance / "test.csv"),
                 "--penalty", "mcp:2:10", "--no-timing", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == SURFACE_HEADER and len(lines) == 2


def test_dof_matches_library(capsys):
    assert main(["dof", "--m", "10", "--n", "10", "--penalty", "mcp:3:2", "--reps", "2000"]) == 0
    out = capsys.readouterr().out
    ref = df_montecarlo(10, 10, PenaltySpec.from_token("mcp:3:2"), reps=2000, seed=0)
    assert f"{ref.value:.6f}" in out and "+/-" in out


def test_dof_other_methods(capsys):
    assert main(["dof", "--m", "6", "--n", "5", "--penalty", "mcp:2:5", "--reps", "20",
                 "--method", "divergence-fd"]) == 0
    assert main(["dof", "--m", "400", "--n", "400", "--penalty", "mcp:20:2", "--reps", "20000",
                 "--method", "mp-asymptotic"]) == 0
    assert capsys.readouterr().out.count("df =") == 2


def test_calibrate_csv(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["calibrate", "--m", "6", "--n", "5", "--n-lambda", "3", "--gammas", "10,3",
                 "--reps", "100", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "lambda_tilde,gamma,lambda_calibrated,df_target,df_achieved,stderr"
    assert len(lines) == 1 + 3 * 3


def test_convert_small_file(tmp_path):
    src = tmp_path / "u.data"
    src.write_text("1\t1\t5\t0\n2\t3\t4\t0\n3\t2\t1\t0\n")
    assert main(["convert", "--in", str(src), "--format", "ml100k", "--out", str(tmp_path / "t.csv")]) == 0
    assert (tmp_path / "t.csv").read_text().splitlines() == ["0,0,5.0", "1,2,4.0", "2,1,1.0"]
    assert main(["convert", "--in", str(tmp_path / "t.csv"), "--format", "csv",
                 "--out", str(tmp_path / "t.mtx")]) == 0
    assert "matrix coordinate" in (tmp_path / "t.mtx").read_text().splitlines()[0]


@pytest.mark.skipif(ml100k_path() is None, reason="ml-100k u.data not available")
def test_convert_full_ml100k(tmp_path):
    out = tmp_path / "triplets.csv"
    assert main(["convert", "--in", str(ml100k_path()), "--format", "ml100k", "--out", str(out)]) == 0
    with open(out) as fh:
        assert sum(1 for _ in fh) == 100000


@pytest.mark.parametrize(
    "argv,code",
    [
        (["fit", "--train", "/nonexistent.csv", "--penalty", "l1:1", "--shape", "3,3", "--out", "x.csv"], 2),
        (["dof", "--m", "5", "--n", "5", "--penalty", "mcp:1"], 1),
        (["dof", "--m", "5", "--n", "5", "--penalty", "mcp:1:2", "--ell", "-1"], 1),
        (["dof", "--m", "5", "--n", "5", "--penalty", "mcp:1:0.5"], 1),
        (["nosuch"], 1),
        ([], 1),
    ],
)
def test_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_console_script_and_module(tmp_path):
    exe = shutil.which("ncimpute")
    assert exe is not None
    r = subprocess.run([exe, "dof", "--m", "4", "--n", "3", "--penalty", "l1:0", "--reps", "5"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "df = 12" in r.stdout
    r = subprocess.run([sys.executable, "-m", "ncimpute", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "surface" in r.stdout
