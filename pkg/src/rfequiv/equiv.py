"""Scalar fixed point alpha, assembled solution blocks at zero, and the
closed-form test-error prediction.

The central objects: the unique alpha in [-1, 0) solving

    alpha = -(1 + tr(K_aa (delta I - d alpha K_aa)^{-1}))^{-1},

the matrix ``M11 = (delta I - d alpha K_aa)^{-1}``, the variance amplitude

    beta = alpha^2 tr(K_hh + d alpha K_ha M11 (I + delta M11) K_ah) / denom,
    denom = 1 - || sqrt(d) alpha K_aa^{1/2} M11 K_aa^{1/2} ||_F^2,

and the prediction ``d beta ||K_aa^{1/2} M11 y||^2 + ||d alpha K_ha M11 y + yhat||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import NonConvergence

__all__ = [
    "AlphaSolution",
    "BlockM0",
    "DENOM_GUARD",
    "DenominatorDegenerate",
    "EquivSolution",
    "assemble_M0",
    "build_equiv",
    "kernel_ridge_error",
    "solve_alpha",
    "solve_subdel",
]

DENOM_GUARD = 1e-8
_EIG_CLAMP_REL = 1e-8


class DenominatorDegenerate(RuntimeError):
    """The variance-series denominator fell to or below the positivity guard."""


@dataclass
class AlphaSolution:
    """Converged scalar fixed point together with the spectrum it used."""

    alpha: float
    iterations: int
    residual: float
    eigenvalues: np.ndarray  # spectrum of K_aa, descending


@dataclass
class EquivSolution:
    """Prediction of the test error and every intermediate the formula uses."""

    alpha: float
    M11: np.ndarray
    beta: float
    denom: float
    effective_ridge: float
    predicted_error: float
    term_variance: float
    term_bias: float
    iterations: int
    residual: float

    def to_report(self):
        """Report dict with the fixed serialization key order."""
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "denom": self.denom,
            "effective_ridge": self.effective_ridge,
            "predicted_error": self.predicted_error,
            "term_variance": self.term_variance,
            "term_bias": self.term_bias,
            "iterations": self.iterations,
            "residual": self.residual,
        }


@dataclass
class BlockM0:
    """Blocks of the self-consistent solution matrix at spectral parameter 0.

    ``m34_minus_identity`` marks the constant -I coupling block between the
    two test slots; it is never materialized.
    """

    M11: np.ndarray
    M22_scalar: float
    M13: np.ndarray
    M31: np.ndarray
    M33: np.ndarray
    m34_minus_identity: bool = True


def _clamped_eigh(K):
    """Eigendecomposition of a symmetric PSD matrix with a tolerance for
    Monte Carlo round-off: eigenvalues in [-1e-8 * lam_max, 0) are clamped to
    zero, anything below that is an error."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape[0] != K.shape[1]:
        raise ValueError("K_aa must be square")
    gap = np.linalg.norm(K - K.T)
    if gap > 1e-12 * max(1.0, np.linalg.norm(K)):
        raise ValueError(f"K_aa is not symmetric (asymmetry {gap:.3e})")
    w, V = np.linalg.eigh((K + K.T) / 2)
    lam_max = max(float(w[-1]), 0.0)
    floor = -_EIG_CLAMP_REL * lam_max
    if float(w[0]) < floor:
        raise ValueError(
            f"negative eigenvalue {w[0]:.6e} below the clamp floor {floor:.6e}"
        )
    return np.clip(w, 0.0, None), V


def _iterate_alpha(lam, d, delta, tol, max_iter, alpha0):
    if alpha0 > 0:
        raise ValueError("alpha0 must be <= 0")
    alpha = float(alpha0)
    residual = np.inf
    for it in range(max_iter):
        # delta - d*alpha*lam >= delta > 0 whenever alpha <= 0
        t = -1.0 / (1.0 + float(np.sum(lam / (delta - d * alpha * lam))))
        residual = abs(alpha - t)
        if residual <= tol:
            return alpha, it, residual
        alpha = t
    raise NonConvergence(
        f"alpha iteration stalled at residual {residual:.3e} "
        f"after {max_iter} iterations"
    )


def solve_alpha(K_aa, d, delta, tol=1e-13, max_iter=100_000, alpha0=-1.0):
    """Solve the scalar fixed point by iterating in eigenvalue form.

    One symmetric eigendecomposition up front turns each update into a
    scalar sum, alpha <- -(1 + sum_j lam_j / (delta - d alpha lam_j))^{-1}.
    The iteration starts at ``alpha0`` (default -1, which keeps all iterates
    inside [-1, 0)) and stops when |alpha - T(alpha)| <= tol.

    Returns
    -------
    AlphaSolution

    Raises
    ------
    NonConvergence
        If the budget of ``max_iter`` updates is exhausted.
    ValueError
        If ``K_aa`` has an eigenvalue below -1e-8 * lam_max.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be positive")
    w, _ = _clamped_eigh(K_aa)
    alpha, iterations, residual = _iterate_alpha(w, d, delta, tol, max_iter, alpha0)
    return AlphaSolution(alpha, iterations, residual, w[::-1].copy())


def build_equiv(K, y, yhat, d, delta, tol=1e-13):
    """Assemble the deterministic test-error prediction for one instance.

    Solves alpha, forms ``M11``, checks the variance-series denominator
    against the positivity guard, and evaluates both prediction terms.

    Raises
    ------
    DenominatorDegenerate
        If denom <= 1e-8, which signals inputs outside the regime where the
        prediction is meaningful (e.g. near-interpolation with tiny ridge).
    """
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape[0] != K.n_train:
        raise ValueError("y length must equal the K_aa dimension")
    if yhat.shape[0] != K.n_test:
        raise ValueError("yhat length must equal the K_hh dimension")
    if d < 1:
        raise ValueError("d must be >= 1")
    if delta <= 0:
        raise ValueError("delta must be positive")

    w, V = _clamped_eigh(K.K_aa)
    alpha, iterations, residual = _iterate_alpha(w, d, delta, tol, 100_000, -1.0)

    g = 1.0 / (delta - d * alpha * w)  # eigenvalues of M11
    M11 = (V * g) @ V.T
    M11 = (M11 + M11.T) / 2

    denom = 1.0 - d * alpha ** 2 * float(np.sum((w * g) ** 2))
    if denom <= DENOM_GUARD:
        raise DenominatorDegenerate(
            f"variance-series denominator {denom:.6e} <= {DENOM_GUARD:g}"
        )

    P = M11 + delta * (M11 @ M11)  # M11 (I + delta M11)
    cross = float(np.sum(K.K_ah * (P @ K.K_ah)))  # tr(K_ha P K_ah)
    beta = alpha ** 2 * (float(np.trace(K.K_hh)) + d * alpha * cross) / denom

    My = M11 @ y
    term_variance = d * beta * float(My @ (K.K_aa @ My))
    resid = d * alpha * (K.K_ha @ My) + yhat
    term_bias = float(resid @ resid)

    return EquivSolution(
        alpha=alpha,
        M11=M11,
        beta=beta,
        denom=denom,
        effective_ridge=-delta / alpha,
        predicted_error=term_variance + term_bias,
        term_variance=term_variance,
        term_bias=term_bias,
        iterations=iterations,
        residual=residual,
    )


def assemble_M0(K, alpha, d, delta, tol=1e-13):
    """Assemble the zero-argument solution blocks from a converged alpha.

    The supplied alpha must satisfy the consistency identity
    ``alpha = -(1 + tr(K_aa M11))^{-1}`` within 10 * tol; anything else is
    rejected as an inconsistent pairing of alpha with (K_aa, d, delta).
    """
    w, V = _clamped_eigh(K.K_aa)
    g = 1.0 / (delta - d * alpha * w)
    M11 = (V * g) @ V.T
    M11 = (M11 + M11.T) / 2
    trKM = float(np.sum(w * g))
    consistency = abs(alpha + 1.0 / (1.0 + trKM))
    if consistency > 10 * tol:
        raise ValueError(
            f"inconsistent alpha: consistency residual {consistency:.3e} "
            f"exceeds {10 * tol:.3e}"
        )
    M13 = -d * alpha * (M11 @ K.K_ah)
    M31 = -d * alpha * (K.K_ha @ M11)
    M33 = (d * alpha) ** 2 * (K.K_ha @ M11 @ K.K_ah) + d * alpha * K.K_hh
    return BlockM0(M11, float(alpha), M13, M31, M33)


def _nonmonotone(seq):
    return any(b > a for a, b in zip(seq, seq[1:]))


def solve_subdel(K_aa, d, delta, z, tol=1e-10, max_iter=10_000):
    """Matrix route: damped Picard iteration on the two-block self-consistent
    equation with the spectral parameter spanning the full diagonal.

    The update inverts ``diag((delta - z) I - d nu K_aa, -(1 + z + tr(K_aa N11)) I_d)``,
    so iterates stay block-diagonal with a scalar second block.  ``z`` must
    be 0 (direct real iteration) or lie in the open upper half-plane.  A 0.5
    damping factor is switched on permanently if the defect is non-monotone
    over 10 consecutive steps.

    Returns
    -------
    (M11, M22_scalar) : (complex ndarray, complex)

    Raises
    ------
    NonConvergence
        If the defect never reaches ``tol``.
    RuntimeError
        If the imaginary part drops below -1e-10 while Im z > 0.
    """
    z = complex(z)
    if z != 0 and not z.imag > 0:
        raise ValueError("z must be 0 or lie in the open upper half-plane")
    K = np.atleast_2d(np.asarray(K_aa, dtype=float))
    gap = np.linalg.norm(K - K.T)
    if gap > 1e-12 * max(1.0, np.linalg.norm(K)):
        raise ValueError(f"K_aa is not symmetric (asymmetry {gap:.3e})")
    n = K.shape[0]
    I = np.eye(n)
    complex_mode = z != 0
    if complex_mode:
        N11 = 1j * I.astype(complex)
        nu = 1j
    else:
        z = 0.0
        N11 = I.copy()
        nu = -1.0

    history = []
    damped = False
    defect = np.inf
    for _ in range(max_iter):
        trKN = np.sum(K * N11)  # tr(K N11); iterates are symmetric
        u22 = -(1.0 + z + trKN)  # scalar multiplying I_d in the update
        U11 = (delta - z) * I - (d * nu) * K
        D11 = U11 @ N11 - I
        # Frobenius defect over both blocks; the scalar block contributes d copies
        defect = float(
            np.sqrt(np.linalg.norm(D11) ** 2 + d * abs(u22 * nu - 1.0) ** 2)
        )
        history.append(defect)
        if defect <= tol:
            return np.asarray(N11, dtype=complex), complex(nu)
        if not damped and len(history) >= 10 and _nonmonotone(history[-10:]):
            damped = True
        N11_next = np.linalg.inv(U11)
        nu_next = 1.0 / u22
        if damped:
            N11 = 0.5 * (N11 + N11_next)
            nu = 0.5 * (nu + nu_next)
        else:
            N11, nu = N11_next, nu_next
        if complex_mode:
            im_min = min(
                float(np.linalg.eigvalsh((N11 - N11.conj().T) / 2j)[0]),
                nu.imag,
            )
            if im_min < -1e-10:
                raise RuntimeError(
                    f"lost the upper-half-plane invariant (min Im eig {im_min:.3e})"
                )
    raise NonConvergence(
        f"matrix iteration stalled at defect {defect:.3e} after {max_iter} iterations"
    )


def kernel_ridge_error(K, y, yhat, d, ridge):
    """Squared test error of kernel ridge regression on the kernel blocks:
    ``||yhat - d K_ha (d K_aa + ridge I)^{-1} y||^2``.

    With ridge equal to -delta/alpha this reproduces the bias term of
    :func:`build_equiv` exactly (implicit-regularization identity).
    """
    if ridge <= 0:
        raise ValueError("ridge must be positive")
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    G = d * K.K_aa + ridge * np.eye(K.n_train)
    c = cho_factor((G + G.T) / 2, lower=True)
    v = cho_solve(c, y)
    r = yhat - d * (K.K_ha @ v)
    return float(r @ r)
