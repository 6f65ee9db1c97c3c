import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from scatterct.cli import main

SCENE = {
    "spec_version": 1,
    "geometry": {
        "grid": {"n": 6, "extent_cm": 20},
        "detectors": {"count": 5},
        "atten_bins": {"lo_kev": 20, "hi_kev": 120, "width_kev": 10},
        "spectra": {"default": {"kramers": {"e_max_kev": 140, "bin_width_kev": 10}}},
    },
    "phantom": "phantom2",
    "noise": {"snr_db": 50, "seed": 0},
    "recon": {"scales": [3, 6], "lambda_rho": 10.0, "lambda_p": 0.1, "max_cycles": 1},
}


def write_scene(path, **recon):
    doc = json.loads(json.dumps(SCENE))
    doc["recon"].update(recon)
    path.write_text(json.dumps(doc, indent=2))
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_scene(base / "scene.json")
    assert main(["simulate", "--config", str(cfg), "--out", str(base / "data")]) == 0
    return base / "data"


@pytest.fixture(scope="module")
def recon_dirs(data_dir):
    out = {}
    for mode in ("atten", "scatter", "both"):
        d = data_dir.parent / f"recon_{mode}"
        assert main(["reconstruct", "--data", str(data_dir), "--mode", mode, "--out", str(d)]) == 0
        out[mode] = d
    return out


def test_simulate_outputs(data_dir):
    names = {p.name for p in data_dir.iterdir()}
    assert {"scene.json", "sinograms.bin", "manifest.json", "truth_rho.csv", "truth_p.pgm"} <= names
    m = json.loads((data_dir / "manifest.json").read_text())
    assert m["kind"] == "simulate" and m["sigma_A"] > 0


def test_reconstruct_outputs(recon_dirs):
    d = recon_dirs["both"]
    for name in ("rho.csv", "p.csv", "rho.pgm", "trace.json", "lambdas.json", "scale3_rho.csv", "cycle1_rho.csv"):
        assert (d / name).exists(), name
    trace = json.loads((d / "trace.json").read_text())
    assert trace["mode"] == "both" and trace["lambda_rho"] == 10.0
    assert np.loadtxt(d / "rho.csv", delimiter=",").shape == (6, 6)


def test_reconstruct_is_deterministic(data_dir, recon_dirs, tmp_path):
    assert main(["reconstruct", "--data", str(data_dir), "--mode", "both", "--out", str(tmp_path / "r"),
                 "--no-checkpoint"]) == 0
    assert (tmp_path / "r" / "rho.csv").read_bytes() == (recon_dirs["both"] / "rho.csv").read_bytes()
    assert (tmp_path / "r" / "p.csv").read_bytes() == (recon_dirs["both"] / "p.csv").read_bytes()


def test_evaluate_comparison(data_dir, recon_dirs, tmp_path, capsys):
    rc = main(["evaluate", "--recon", *map(str, recon_dirs.values()), "--truth", str(data_dir),
               "--out", str(tmp_path / "rep")])
    assert rc == 0
    assert "| mode | rmse_rho | rmse_p |" in capsys.readouterr().out
    metrics = json.loads((tmp_path / "rep" / "metrics.json").read_text())
    assert set(metrics["runs"]) == {"atten", "scatter", "both"}
    assert (tmp_path / "rep" / "comparison.csv").read_text().startswith("mode,rmse_rho,rmse_p")
    assert (tmp_path / "rep" / "ellipses_both.svg").exists()


def test_config_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"spec_version": 1,\n "geometry": 3}')
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "bad.json" in capsys.readouterr().err


def test_threads_env_exit_2(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("SCATTERCT_THREADS", "zero")
    assert main(["reconstruct", "--data", str(data_dir), "--out", str(tmp_path / "r")]) == 2
    monkeypatch.setenv("SCATTERCT_THREADS", "1")
    assert main(["reconstruct", "--data", str(data_dir), "--mode", "atten", "--out", str(tmp_path / "r")]) == 0


def test_corrupt_data_exit_3(data_dir, tmp_path):
    bad = tmp_path / "data"
    shutil.copytree(data_dir, bad)
    raw = (bad / "sinograms.bin").read_bytes()
    (bad / "sinograms.bin").write_bytes(raw[:-16])
    assert main(["reconstruct", "--data", str(bad), "--out", str(tmp_path / "r")]) == 3
    assert main(["reconstruct", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 3


def test_foreign_recon_exit_3(recon_dirs, tmp_path):
    other = tmp_path / "other"
    doc = json.loads(json.dumps(SCENE))
    doc["noise"]["seed"] = 9
    (tmp_path / "s.json").write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(tmp_path / "s.json"), "--out", str(other)]) == 0
    assert main(["evaluate", "--recon", str(recon_dirs["atten"]), "--truth", str(other),
                 "--out", str(tmp_path / "rep")]) == 3


def test_override_geometry_mismatch_exit_3(data_dir, tmp_path):
    doc = json.loads(json.dumps(SCENE))
    doc["geometry"]["detectors"]["count"] = 7
    (tmp_path / "s.json").write_text(json.dumps(doc))
    assert main(["reconstruct", "--data", str(data_dir), "--config", str(tmp_path / "s.json"),
                 "--out", str(tmp_path / "r")]) == 3


def test_solver_failure_exit_4(data_dir, tmp_path, capsys):
    cfg = write_scene(tmp_path / "s.json", fpi_max=1)
    rc = main(["reconstruct", "--data", str(data_dir), "--mode", "scatter", "--config", str(cfg),
               "--out", str(tmp_path / "r"), "--no-checkpoint"])
    assert rc == 4
    assert "solver failure" in capsys.readouterr().err


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "scatterct.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "reconstruct", "evaluate"):
        assert cmd in out.stdout
