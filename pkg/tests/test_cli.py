"""Command-line front door: verbs, report files, exit codes."""

import json

import numpy as np
import pytest

from rfequiv.cli import main


@pytest.fixture
def toy_files(tmp_path):
    """Kernel JSON with K_aa = I_2, no coupling, K_hh = I_1, plus labels."""
    kern = tmp_path / "toy.json"
    kern.write_text(json.dumps({
        "n_train": 2, "n_test": 1, "samples": 1,
        "K_aa": [[1.0, 0.0], [0.0, 1.0]],
        "K_ah": [[0.0], [0.0]],
        "K_ha": [[0.0, 0.0]],
        "K_hh": [[1.0]],
    }))
    y = tmp_path / "y.csv"
    y.write_text("1\n0\n")
    yhat = tmp_path / "yhat.csv"
    yhat.write_text("0.7\n")
    return kern, y, yhat


def test_estimate_kernels_writes_valid_report(tmp_path):
    out = tmp_path / "k.json"
    code = main(["estimate-kernels", "--synthetic", "12,6,8", "--noise-sd",
                 "0.3", "--sigma", "erf", "--samples", "800", "--seed", "3",
                 "--out", str(out)])
    assert code == 0
    rep = json.loads(out.read_text())
    assert rep["n_train"] == 12 and rep["n_test"] == 6
    assert rep["samples"] == 800
    assert np.asarray(rep["K_aa"]).shape == (12, 12)


def test_estimate_kernels_rerun_is_byte_identical(tmp_path):
    args = ["estimate-kernels", "--synthetic", "8,4,5", "--noise-sd", "0.2",
            "--samples", "300", "--seed", "1"]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_predict_toy_instance(tmp_path, toy_files):
    kern, y, yhat = toy_files
    out = tmp_path / "p.json"
    code = main(["predict", "--kernels", str(kern), "--y", str(y), "--yhat",
                 str(yhat), "--d", "2", "--delta", "1", "--out", str(out)])
    assert code == 0
    rep = json.loads(out.read_text())
    assert -1.0 <= rep["alpha"] < 0.0
    assert rep["alpha"] == pytest.approx(-0.5, abs=1e-9)
    assert rep["predicted_error"] == pytest.approx(1 / 6 + 0.49, abs=1e-9)
    assert list(rep) == ["alpha", "beta", "denom", "effective_ridge",
                         "predicted_error", "term_variance", "term_bias",
                         "iterations", "residual"]


def test_predict_rerun_is_byte_identical(tmp_path, toy_files):
    kern, y, yhat = toy_files
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    args = ["predict", "--kernels", str(kern), "--y", str(y), "--yhat",
            str(yhat), "--d", "2", "--delta", "1"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def write_design(tmp_path):
    x = tmp_path / "X.csv"
    np.savetxt(x, np.sqrt(2) * np.eye(2), delimiter=",")
    xh = tmp_path / "Xhat.csv"
    np.savetxt(xh, np.array([[0.0, np.sqrt(2)]]), delimiter=",")
    return x, xh


def test_simulate_writes_json_and_csv(tmp_path, toy_files):
    _, y, yhat = toy_files
    x, xh = write_design(tmp_path)
    out = tmp_path / "s.json"
    code = main(["simulate", "--x", str(x), "--xhat", str(xh), "--y", str(y),
                 "--yhat", str(yhat), "--d", "2", "--delta", "1", "--reps",
                 "3", "--samples", "400", "--out", str(out)])
    assert code == 0
    rep = json.loads(out.read_text())
    assert list(rep) == ["config", "replicates", "mean", "std", "predicted",
                         "rel_gap"]
    assert len(rep["replicates"]) == 3
    csv_lines = (tmp_path / "s.csv").read_text().splitlines()
    assert csv_lines[0] == "replicate,error"
    assert len(csv_lines) == 4


def test_simulate_honors_explicit_csv_path(tmp_path, toy_files):
    _, y, yhat = toy_files
    x, xh = write_design(tmp_path)
    out = tmp_path / "s.json"
    csv = tmp_path / "elsewhere.csv"
    code = main(["simulate", "--x", str(x), "--xhat", str(xh), "--y", str(y),
                 "--yhat", str(yhat), "--d", "2", "--delta", "1", "--reps",
                 "2", "--samples", "400", "--out", str(out), "--csv",
                 str(csv)])
    assert code == 0
    assert csv.exists()


def test_compare_reports_toy_prediction(tmp_path, toy_files):
    kern, y, yhat = toy_files
    x, xh = write_design(tmp_path)
    out = tmp_path / "c.json"
    code = main(["compare", "--x", str(x), "--xhat", str(xh), "--y", str(y),
                 "--yhat", str(yhat), "--kernels", str(kern), "--d", "2",
                 "--delta", "1", "--reps", "3", "--out", str(out)])
    assert code == 0
    rep = json.loads(out.read_text())
    assert list(rep) == ["empirical_mean", "empirical_std", "predicted",
                         "rel_gap"]
    assert rep["predicted"] == pytest.approx(1 / 6 + 0.49, abs=1e-9)


def test_sweep_grid_is_sorted_cartesian_product(tmp_path):
    out = tmp_path / "g.csv"
    code = main(["sweep", "--synthetic", "16,8,10", "--noise-sd", "0.2",
                 "--d-list", "8,4", "--delta-list", "1.0,0.5", "--reps", "2",
                 "--samples", "300", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "d,delta,predicted,empirical_mean,rel_gap"
    rows = [ln.split(",") for ln in lines[1:]]
    assert [(int(r[0]), float(r[1])) for r in rows] == [
        (4, 0.5), (4, 1.0), (8, 0.5), (8, 1.0)]


def test_diagnose_report_fields(tmp_path):
    out = tmp_path / "d.json"
    code = main(["diagnose", "--synthetic", "16,8,10", "--noise-sd", "0.2",
                 "--d", "8", "--delta", "0.5", "--reps", "6", "--samples",
                 "300", "--eta-list", "100,1000", "--out", str(out)])
    assert code == 0
    rep = json.loads(out.read_text())
    assert list(rep) == ["delta_gaussianity", "anisotropic_gap",
                         "zeroth_moment", "centering"]
    assert list(rep["delta_gaussianity"]) == ["value", "standard_error",
                                              "pairs"]
    assert rep["delta_gaussianity"]["pairs"] == 3
    assert len(rep["anisotropic_gap"]) == 5
    assert len(rep["zeroth_moment"]["etas"]) == 2
    assert rep["zeroth_moment"]["deltas"][1] < rep["zeroth_moment"]["deltas"][0]


def test_exit_2_on_oversize_pencil(tmp_path):
    out = tmp_path / "x.json"
    code = main(["diagnose", "--synthetic", "900,700,5", "--d", "600",
                 "--delta", "0.5", "--out", str(out)])
    assert code == 2
    assert not out.exists()


def test_exit_2_on_missing_required_option(tmp_path):
    code = main(["predict", "--y", "y.csv", "--yhat", "yh.csv", "--d", "2",
                 "--delta", "1", "--out", str(tmp_path / "x.json")])
    assert code == 2


def test_exit_2_on_unknown_verb():
    assert main(["frobnicate"]) == 2


def test_exit_3_on_missing_input(tmp_path, toy_files):
    _, y, yhat = toy_files
    code = main(["predict", "--kernels", str(tmp_path / "absent.json"),
                 "--y", str(y), "--yhat", str(yhat), "--d", "2", "--delta",
                 "1", "--out", str(tmp_path / "x.json")])
    assert code == 3


def test_exit_3_on_malformed_kernel_json(tmp_path, toy_files):
    _, y, yhat = toy_files
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = main(["predict", "--kernels", str(bad), "--y", str(y), "--yhat",
                 str(yhat), "--d", "2", "--delta", "1", "--out",
                 str(tmp_path / "x.json")])
    assert code == 3


def test_exit_4_writes_failure_name_to_report(tmp_path):
    kern = tmp_path / "deg.json"
    kern.write_text(json.dumps({
        "n_train": 4, "n_test": 1, "samples": 1,
        "K_aa": np.eye(4).tolist(),
        "K_ah": [[0.0]] * 4,
        "K_ha": [[0.0] * 4],
        "K_hh": [[1.0]],
    }))
    y = tmp_path / "y.csv"
    y.write_text("1\n1\n1\n1\n")
    yhat = tmp_path / "yh.csv"
    yhat.write_text("0\n")
    out = tmp_path / "fail.json"
    code = main(["predict", "--kernels", str(kern), "--y", str(y), "--yhat",
                 str(yhat), "--d", "4", "--delta", "1e-18", "--out",
                 str(out)])
    assert code == 4
    rep = json.loads(out.read_text())
    assert rep["error"] in ("NonConvergence", "DenominatorDegenerate")
    assert "message" in rep
