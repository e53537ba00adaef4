"""Monte Carlo kernel-block estimation and its analytic identity oracle."""

import numpy as np
import pytest

from rfequiv import (
    Activation,
    Dataset,
    KernelSet,
    MatrixFormatError,
    analytic_identity_kernels,
    default_samples,
    estimate_kernels,
    load_kernels,
    load_kernels_raw,
    save_kernels,
    save_kernels_raw,
    synthetic_regression,
    verify_centering,
)

IDENTITY = Activation("identity")
ERF = Activation("erf")


# ---------------------------------------------------------------------------
# analytic identity oracle
# ---------------------------------------------------------------------------

def test_identity_kernels_on_eye():
    ds = Dataset(np.eye(2), np.eye(2), np.zeros(2), np.zeros(2))
    ks = analytic_identity_kernels(ds, 2)
    assert np.array_equal(ks.K_aa, np.eye(2) / 2)


def test_identity_kernels_orthogonal_rows():
    ds = Dataset(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]),
                 np.zeros(1), np.zeros(1))
    ks = analytic_identity_kernels(ds, 1)
    assert ks.K_ah == pytest.approx(np.zeros((1, 1)))


def test_identity_kernels_match_brute_force():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((5, 3))
    xh = rng.standard_normal((2, 3))
    ds = Dataset(x, xh, np.zeros(5), np.zeros(2))
    ks = analytic_identity_kernels(ds, 3)
    assert np.allclose(ks.K_aa, x @ x.T / 3, rtol=1e-15, atol=0)
    assert np.allclose(ks.K_ah, x @ xh.T / 3, rtol=1e-15, atol=0)
    assert np.allclose(ks.K_hh, xh @ xh.T / 3, rtol=1e-15, atol=0)


# ---------------------------------------------------------------------------
# Monte Carlo estimator
# ---------------------------------------------------------------------------

def test_estimator_converges_to_identity_oracle():
    # second moment of X z / sqrt(n) over z ~ N(0, I) is X X^T / n
    ds = synthetic_regression(30, 10, 5, 0.5, seed=6)
    ref = analytic_identity_kernels(ds, 30)
    est = estimate_kernels(ds, IDENTITY, IDENTITY, 30, 50_000, seed=0)
    rel = np.linalg.norm(est.K_aa - ref.K_aa) / np.linalg.norm(ref.K_aa)
    assert rel <= 3 / np.sqrt(50_000)


def test_zero_design_gives_zero_blocks():
    ds = Dataset(np.zeros((3, 2)), np.zeros((2, 2)), np.zeros(3), np.zeros(2))
    ks = estimate_kernels(ds, ERF, IDENTITY, 3, 64, seed=1)
    for f in ("K_aa", "K_ah", "K_ha", "K_hh"):
        assert np.count_nonzero(getattr(ks, f)) == 0


def test_estimator_is_deterministic_bitwise():
    ds = synthetic_regression(8, 4, 6, 0.3, seed=2)
    a = estimate_kernels(ds, ERF, IDENTITY, 8, 1500, seed=4)
    b = estimate_kernels(ds, ERF, IDENTITY, 8, 1500, seed=4)
    for f in ("K_aa", "K_ah", "K_ha", "K_hh"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_estimator_independent_of_worker_count(monkeypatch):
    ds = synthetic_regression(8, 4, 6, 0.3, seed=2)
    a = estimate_kernels(ds, ERF, IDENTITY, 8, 3000, seed=4)
    monkeypatch.setenv("RF_EQUIV_THREADS", "1")
    b = estimate_kernels(ds, ERF, IDENTITY, 8, 3000, seed=4)
    for f in ("K_aa", "K_ah", "K_ha", "K_hh"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_two_seeds_agree_within_clt_band():
    ds = synthetic_regression(30, 10, 5, 0.5, seed=6)
    ref = analytic_identity_kernels(ds, 30)
    a = estimate_kernels(ds, IDENTITY, IDENTITY, 30, 4000, seed=10)
    b = estimate_kernels(ds, IDENTITY, IDENTITY, 30, 4000, seed=11)
    gap = np.linalg.norm(a.K_aa - b.K_aa) / np.linalg.norm(ref.K_aa)
    assert gap <= 10 / np.sqrt(4000)


def test_estimated_joint_matrix_is_psd_up_to_roundoff():
    ds = synthetic_regression(10, 6, 7, 0.4, seed=5)
    ks = estimate_kernels(ds, ERF, IDENTITY, 10, 500, seed=8)
    w = np.linalg.eigvalsh(ks.joint())
    assert w.min() >= -1e-10 * max(w.max(), 1e-300)


def test_mc_error_scales_like_inverse_sqrt_m():
    ds = synthetic_regression(30, 10, 5, 0.5, seed=6)
    ref = analytic_identity_kernels(ds, 30)
    den = np.linalg.norm(ref.K_aa)
    ms = [100, 1000, 10_000]
    errs = [
        np.linalg.norm(
            estimate_kernels(ds, IDENTITY, IDENTITY, 30, m, seed=3).K_aa
            - ref.K_aa
        )
        / den
        for m in ms
    ]
    slope = np.polyfit(np.log(ms), np.log(errs), 1)[0]
    assert -0.65 <= slope <= -0.35


def test_default_samples_floor_and_scaling():
    assert default_samples(10, 10) == 10_000
    assert default_samples(400, 400) == 20 * 800


# ---------------------------------------------------------------------------
# centering score
# ---------------------------------------------------------------------------

def test_centering_score_small_for_odd_activation():
    ds = synthetic_regression(12, 5, 8, 0.2, seed=3)
    m = 4000
    v = verify_centering(ERF, IDENTITY, ds, 12, m, seed=2)
    assert v <= 5 / np.sqrt(m)


def test_centering_score_flags_shifted_activation():
    # sigma(x) = x + 1 via a linear interpolation table; for scalar design
    # X = I_1 the score is E[z+1] / sqrt(E[(z+1)^2]) = 1/sqrt(2)
    shifted = Activation("custom-table", (-12.0, 12.0, -11.0, 13.0))
    ds = Dataset(np.eye(1), np.eye(1), np.zeros(1), np.zeros(1))
    v = verify_centering(shifted, IDENTITY, ds, 1, 20_000, seed=5)
    assert v > 0.5
    assert v == pytest.approx(1 / np.sqrt(2), abs=0.05)


# ---------------------------------------------------------------------------
# validation and serialization
# ---------------------------------------------------------------------------

def test_kernelset_rejects_asymmetric_block():
    bad = np.array([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ValueError):
        KernelSet(bad, np.zeros((2, 1)), np.zeros((1, 2)), np.eye(1), 1)


def test_kernelset_requires_exact_transpose_pair():
    with pytest.raises(ValueError):
        KernelSet(np.eye(2), np.full((2, 1), 0.1),
                  np.full((1, 2), 0.1 + 1e-16), np.eye(1), 1)


def test_kernelset_rejects_indefinite_joint():
    # off-diagonal coupling stronger than the diagonal blocks allow
    with pytest.raises(ValueError):
        KernelSet(np.eye(2), np.full((2, 2), 0.9), np.full((2, 2), 0.9),
                  np.eye(2), 1)


def test_kernels_json_round_trip(tmp_path):
    ds = synthetic_regression(6, 3, 4, 0.2, seed=1)
    ks = estimate_kernels(ds, ERF, IDENTITY, 6, 300, seed=7)
    p = tmp_path / "k.json"
    save_kernels(ks, p)
    back = load_kernels(p)
    assert back.samples == ks.samples
    for f in ("K_aa", "K_ah", "K_ha", "K_hh"):
        assert np.array_equal(getattr(back, f), getattr(ks, f))


def test_kernels_raw_round_trip(tmp_path):
    ds = synthetic_regression(5, 2, 3, 0.2, seed=9)
    ks = estimate_kernels(ds, ERF, IDENTITY, 5, 200, seed=3)
    d = tmp_path / "kern"
    save_kernels_raw(ks, d)
    back = load_kernels_raw(d)
    for f in ("K_aa", "K_ah", "K_ha", "K_hh"):
        assert np.array_equal(getattr(back, f), getattr(ks, f))


def test_load_kernels_rejects_missing_key(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"n_train": 2, "n_test": 1}')
    with pytest.raises(MatrixFormatError):
        load_kernels(p)
