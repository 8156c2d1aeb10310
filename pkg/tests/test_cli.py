import json
import subprocess
import sys
import time

import numpy as np
import pandas as pd
import pytest

import frim.pipeline
from frim.cli import main
from frim.errors import SamplerError
from frim.simulate import SimConfig, generate_dataset

pytestmark = pytest.mark.filterwarnings("ignore:NOT CONVERGED")

FAST = ["--chains", "2", "--warmup", "100", "--draws", "100"]


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture
def toy_csv(tmp_path):
    ds, _ = generate_dataset(SimConfig(I=5, J=2, L=20, seed=3))
    path = tmp_path / "toy.csv"
    ds.to_frame().drop(columns="(Intercept)").to_csv(path, index=False)
    return path


def test_empty_input(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    out = tmp_path / "o"
    assert main(["fit", "--input", str(empty), "--out", str(out)]) == 2
    assert "empty-input" in capsys.readouterr().err
    man = _manifest(out)
    assert man["status"] == "failed" and man["failed_stage"] == "ingest"


def test_toy_fit_end_to_end(toy_csv, tmp_path):
    out = tmp_path / "fit"
    t0 = time.perf_counter()
    code = main(["fit", "--input", str(toy_csv), "--out", str(out), "--bins", "4", "--seed", "7", *FAST])
    wall = time.perf_counter() - t0
    assert code == 0 and wall < 30
    for name in ("beta.csv", "local_fits.csv", "eigen_level1.csv", "eigen_level2.csv", "mfpca.json", "draws.bin",
                 "diagnostics.json", "bands_combined.csv"):
        assert (out / name).exists(), name
    bands = pd.read_csv(out / "bands_combined.csv")
    assert len(bands) == 10 * 4
    assert np.all(bands["lower"] <= bands["mean"]) and np.all(bands["mean"] <= bands["upper"])
    man = _manifest(out)
    assert man["status"] == "ok" and man["seed"] == 7 and "numpy" in man["versions"]
    assert set(man["stage_timings"]) >= {"bin", "local_glmm", "smooth", "mfpca", "sample"}
    assert abs(sum(man["timings"].values()) - man["wall_seconds"]) <= 0.05 * man["wall_seconds"]

    exp = tmp_path / "exp"
    assert main(["export", "--draws-file", str(out / "draws.bin"), "--out", str(exp), "--include-scores"]) == 0
    frame = pd.read_csv(exp / "draws.csv")
    assert len(frame) == 2 * 100


def test_fit_reproducible_from_manifest(toy_csv, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["fit", "--input", str(toy_csv), "--bins", "4", "--seed", "2", *FAST]
    assert main([*args, "--out", str(a)]) == 0
    assert main([*args, "--out", str(b)]) == 0
    for name in ("beta.csv", "bands_combined.csv", "draws.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_simulate_deterministic(tmp_path):
    outs = [tmp_path / "s1", tmp_path / "s2"]
    for out in outs:
        assert main(["simulate", "--I", "6", "--J", "3", "--L", "15", "--seed", "5", "--missing-frac", "0.25",
                     "--out", str(out)]) == 0
    for name in ("data.csv", "simulation.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    t1, t2 = (np.load(o / "truth.npz") for o in outs)
    for key in t1.files:
        np.testing.assert_array_equal(t1[key], t2[key])


def test_config_overrides_flags(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# study\nI = 4\nJ = 2\nL = 12\nseed = 11\n")
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--I", "9", "--out", str(out)]) == 0
    sim = json.loads((out / "simulation.json").read_text())
    assert sim["I"] == 4 and sim["seed"] == 11
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["simulate", "--config", str(bad), "--out", str(out)]) == 2


def test_input_errors(tmp_path, toy_csv):
    out = str(tmp_path / "o")
    assert main(["fit", "--input", str(toy_csv), "--bin-width", "0.1", "--bin-width-pct", "0.1", "--out", out]) == 2
    assert main(["fit", "--input", str(toy_csv), "--workers", "0", "--out", out]) == 2
    assert main(["fit", "--out", out]) == 2
    assert main(["nope"]) == 2


def test_coverage_and_budget(tmp_path, monkeypatch):
    out = tmp_path / "cov"
    args = ["coverage", "--I", "10", "--J", "3", "--L", "20", "--replicates", "2", "--bin-width-pct", "0.1", *FAST]
    assert main([*args, "--out", str(out)]) == 0
    row = pd.read_csv(out / "coverage.csv")
    assert list(row.columns[:3]) == ["case", "family", "I"]
    assert 0 <= row["mpcp"].iloc[0] <= 1

    def broken(*a, **k):
        raise SamplerError("always")

    monkeypatch.setattr(frim.pipeline, "fit_frim", broken)
    out2 = tmp_path / "cov2"
    assert main([*args, "--out", str(out2)]) == 3
    assert _manifest(out2)["failed_stage"] == "coverage"


def test_detect_on_simulated_data(tmp_path):
    out = tmp_path / "det"
    code = main(["detect", "--I", "8", "--J", "4", "--L", "20", "--bin-width-pct", "0.1", "--reference",
                 "predictive", "--out", str(out), *FAST])
    assert code == 0
    reports = json.loads((out / "anomalies.json").read_text())
    assert len(reports) == 8
    assert list(pd.read_csv(out / "anomalies.csv").columns) == ["subject", "visit", "start", "end", "duration"]


def test_console_script():
    res = subprocess.run([sys.executable, "-m", "frim.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "frim" in res.stdout
