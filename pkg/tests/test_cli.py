import hashlib
import io
import json
import os
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from damlab.cli import file_digest, main
from damlab.effect_coding import coding_partial_year
from damlab.panel import load_panel


@pytest.fixture(scope="module")
def panel_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = main(["synth-data", "--units", "30", "--periods", "20", "--treated", "10", "--rr", "0.95,0.95",
                 "--seed", "3", "--out", str(out)])
    assert code == 0
    return out


def read_manifest(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        return json.load(fh)


def test_code_effects_stdout(capsys):
    assert main(["code-effects", "--b", "5", "--te", "0.25"]) == 0
    df = pd.read_csv(io.StringIO(capsys.readouterr().out), float_precision="round_trip")
    c = coding_partial_year(0.25, 5, 7)
    assert df.t.tolist() == list(range(8))
    np.testing.assert_array_equal(df.w0.to_numpy(), c.w0)
    np.testing.assert_array_equal(df.w1.to_numpy(), c.w1)


def test_code_effects_to_directory(tmp_path):
    assert main(["code-effects", "--b", "3", "--horizon", "4", "--out", str(tmp_path)]) == 0
    df = pd.read_csv(tmp_path / "effect_coding.csv")
    assert list(df.columns) == ["t", "w0", "w1"] and len(df) == 5
    m = read_manifest(tmp_path)
    assert m["command"] == "code-effects" and m["config"]["horizon"] == 4


def test_code_effects_bad_fraction(capsys):
    assert main(["code-effects", "--te", "1.0"]) == 2


def test_synth_data(panel_dir):
    p = load_panel(str(panel_dir / "panel.csv"))
    assert p.n_units == 30 and p.n_periods == 20
    assert int(p.treated_mask().sum()) == 10
    m = read_manifest(panel_dir)
    assert m["command"] == "synth-data" and m["seed"] == 3
    assert set(m["versions"]) >= {"damlab", "numpy", "scipy", "pandas", "python"}


def test_synth_data_deterministic(panel_dir, tmp_path):
    main(["synth-data", "--units", "30", "--periods", "20", "--treated", "10", "--rr", "0.95,0.95",
          "--seed", "3", "--out", str(tmp_path)])
    assert (tmp_path / "panel.csv").read_bytes() == (panel_dir / "panel.csv").read_bytes()


def test_fit_writes_outputs(panel_dir, tmp_path, capsys):
    out = tmp_path / "fit"
    code = main(["fit", str(panel_dir / "panel.csv"), "--family", "nb-dam", "--p", "2", "--b", "5",
                 "--out", str(out)])
    assert code == 0
    rr = pd.read_csv(out / "rr.csv")
    assert list(rr.columns) == ["t", "rr", "lo95", "hi95"]
    assert rr.t.tolist() == list(range(6))
    assert np.all((rr.lo95 <= rr.rr) & (rr.rr <= rr.hi95))
    fit = json.loads((out / "fit.json").read_text())
    assert fit["meta"]["variance"] == "mu + mu^2/phi"
    assert fit["names"][:5] == ["alpha", "delta1", "delta2", "beta0", "beta1"]
    m = read_manifest(out)
    digest = hashlib.sha256((panel_dir / "panel.csv").read_bytes()).hexdigest()
    assert m["inputs"]["panel.csv"]["sha256"] == digest
    assert m["config"]["spec"]["family"] == "nb-dam"
    printed = capsys.readouterr().out
    assert "t=5:" in printed and "–" in printed


def test_fit_is_deterministic(panel_dir, tmp_path):
    for k in ("a", "b"):
        assert main(["fit", str(panel_dir / "panel.csv"), "--family", "nb-adl-change", "--out", str(tmp_path / k)]) == 0
    for name in ("fit.json", "rr.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_fit_with_pca(panel_dir, tmp_path):
    out = tmp_path / "pca"
    assert main(["fit", str(panel_dir / "panel.csv"), "--pca", "0.9", "--out", str(out)]) == 0
    red = json.loads((out / "pca.json").read_text())
    assert red["columns"] == ["x1", "x2", "x3"]


def test_missing_exposure_column(panel_dir, tmp_path, capsys):
    df = pd.read_csv(panel_dir / "panel.csv").drop(columns="exposure")
    path = tmp_path / "bad.csv"
    df.to_csv(path, index=False)
    assert main(["fit", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "exposure" in capsys.readouterr().err


def test_missing_file_and_bad_config(tmp_path, capsys):
    assert main(["fit", str(tmp_path / "nope.csv")]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert main(["simulate", "--preset", "nonsense", "--out", str(tmp_path / "s")]) == 2


def test_nonconverged_bayes_exits_3(panel_dir, tmp_path):
    out = tmp_path / "bayes"
    code = main(["fit", str(panel_dir / "panel.csv"), "--no-year-effects", "--bayes", "--chains", "2",
                 "--iter", "20", "--out", str(out)])
    assert code == 3
    m = read_manifest(out)
    assert any("R-hat" in w for w in m["warnings"])
    assert (out / "posterior.json").exists()


def test_bayes_fit_and_report(panel_dir, tmp_path, capsys):
    out = tmp_path / "bayes"
    code = main(["fit", str(panel_dir / "panel.csv"), "--no-year-effects", "--bayes", "--chains", "2",
                 "--iter", "1500", "--seed", "5", "--dump-draws", "--out", str(out)])
    assert code == 0
    draws = pd.read_csv(out / "draws.csv")
    assert len(draws) == 2 * 750
    assert list(draws.columns[:2]) == ["chain", "iteration"]
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    assert "posterior median" in text
    line = [ln for ln in text.splitlines() if ln.strip().startswith("t=5:")][0]
    point, rest = line.split(":")[1].split("(")
    lo, hi = rest.rstrip(")").split("–")
    assert float(lo) <= float(point) <= float(hi)


SIM_CFG = {
    "cells": [[1.0, 1.0]],
    "replications": 2,
    "window": [1, 12],
    "n_treated": 6,
    "base": {"n_units": 20, "n_periods": 16},
}


@pytest.fixture(scope="module")
def sim_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    cfg = root / "study.json"
    cfg.write_text(json.dumps(SIM_CFG))
    dirs = []
    for k in ("a", "b"):
        d = root / k
        assert main(["simulate", "--config", str(cfg), "--seed", "9", "--out", str(d)]) == 0
        dirs.append(d)
    return cfg, dirs


def test_simulate_outputs(sim_dirs):
    cfg, (a, _) = sim_dirs
    m = pd.read_csv(a / "metrics.csv")
    assert set(m.estimator) == {"effect-coded", "change-coded", "nb-dam1", "nb-dam2"}
    assert set(os.listdir(a / "figure_data")) == {"bias_slices.csv", "max_mse_slices.csv", "bias_grid.csv",
                                                  "mse_grid.csv"}
    man = read_manifest(a)
    assert man["inputs"]["study.json"]["sha256"] == file_digest(cfg)
    assert man["config"]["seed"] == 9 and man["config"]["replications"] == 2


def test_simulate_deterministic(sim_dirs):
    _, (a, b) = sim_dirs
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "estimates.csv").read_bytes() == (b / "estimates.csv").read_bytes()


def test_report_metrics(sim_dirs, capsys):
    _, (a, _) = sim_dirs
    capsys.readouterr()
    assert main(["report", str(a)]) == 0
    text = capsys.readouterr().out
    assert "Type I" in text
    for name in ("effect-coded", "change-coded", "nb-dam1", "nb-dam2"):
        assert sum(name in ln for ln in text.splitlines()) == 1


def test_report_missing_inputs(tmp_path):
    assert main(["report", str(tmp_path / "none")]) == 2
    assert main(["report", str(tmp_path)]) == 2
    (tmp_path / "metrics.csv").write_text("")
    assert main(["report", str(tmp_path)]) == 2


def test_report_empty_estimates(sim_dirs, tmp_path):
    _, (a, _) = sim_dirs
    (tmp_path / "metrics.csv").write_bytes((a / "metrics.csv").read_bytes())
    (tmp_path / "estimates.csv").write_text("")
    assert main(["report", str(tmp_path)]) == 2


def test_digest_tracks_every_byte(tmp_path):
    path = tmp_path / "f.bin"
    data = bytearray(os.urandom(4096))
    path.write_bytes(bytes(data))
    d0 = file_digest(path)
    path.write_bytes(bytes(data))
    assert file_digest(path) == d0
    for pos in (0, 1000, 4095):
        flipped = bytearray(data)
        flipped[pos] ^= 1
        path.write_bytes(bytes(flipped))
        assert file_digest(path) != d0


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "damlab.cli", "code-effects", "--b", "1"],
                         capture_output=True, text=True, check=True)
    assert res.stdout.splitlines()[0] == "t,w0,w1"
