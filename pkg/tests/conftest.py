"""Shared builders for the test suite."""

import numpy as np
import pytest

from rfequiv import Dataset, KernelSet


@pytest.fixture
def toy_kernels():
    """K_aa = I_2, no train/test coupling, K_hh = I_1.

    With d=2, delta=1 this instance has the closed-form solution
    alpha = -1/2 (the non-positive root of 2 a^2 - a - 1 = 0),
    M11 = 0.5 I, denom = 3/4, beta = 1/3.
    """
    return KernelSet(
        K_aa=np.eye(2),
        K_ah=np.zeros((2, 1)),
        K_ha=np.zeros((1, 2)),
        K_hh=np.eye(1),
        samples=1,
    )


def rand_psd(rng, n, extra=2):
    g = rng.standard_normal((n, n + extra))
    return g @ g.T / (n + extra)


def rand_kernelset(rng, n, t):
    """A random jointly-PSD kernel set of shape (n, t)."""
    g = rng.standard_normal((n + t, n + t + 3))
    joint = g @ g.T / (n + t + 3)
    return KernelSet(
        K_aa=joint[:n, :n],
        K_ah=joint[:n, n:],
        K_ha=joint[:n, n:].T.copy(),
        K_hh=joint[n:, n:],
        samples=1,
    )


def unit_row_dataset(n_train, n_test, n0, seed):
    """Gaussian design with rows normalized to unit Euclidean norm.

    Normalizing puts the identity- and sign-activation feature scales on
    equal footing, which matters for paired-activation comparisons.
    """
    rng = np.random.default_rng(1000 + seed)
    x = rng.standard_normal((n_train, n0))
    xh = rng.standard_normal((n_test, n0))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    xh /= np.linalg.norm(xh, axis=1, keepdims=True)
    w = rng.standard_normal(n0)
    w /= np.linalg.norm(w)
    return Dataset(x, xh, x @ w, xh @ w)
