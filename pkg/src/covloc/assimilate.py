"""Linear BLUE analysis and the 3D-Var cost terms used by DI01.

``B`` and ``R`` may be passed either as dense arrays or as
:class:`~covloc.core.CovarianceModel` instances (composed on demand).
Inverses are never formed: the gain solves the innovation system through
its Cholesky factor, and every quadratic form ``v^T M^-1 v`` is a Cholesky
solve followed by a dot product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .core import CovarianceModel, as_dense_operator, as_vector
from .errors import DomainError, FactorizationError, NumericalError


def _dense_cov(M, name):
    if isinstance(M, CovarianceModel):
        return M.compose()
    A = np.asarray(M, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError(f"{name} must be a square matrix, got shape {A.shape}")
    return A


def _check_dims(B, R, H):
    ny, nx = H.shape
    if B.shape != (nx, nx):
        raise DomainError(f"B has shape {B.shape}, H expects ({nx}, {nx})")
    if R.shape != (ny, ny):
        raise DomainError(f"R has shape {R.shape}, H expects ({ny}, {ny})")


def _cho(M, name):
    try:
        return sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError:
        raise FactorizationError(f"{name} is not positive definite") from None


def _gain(B, R, H):
    HB = H @ B
    S = HB @ H.T + R
    S = 0.5 * (S + S.T)
    try:
        cf = sla.cho_factor(S, lower=True)
    except np.linalg.LinAlgError:
        cond = float(np.linalg.cond(S))
        raise NumericalError(
            f"innovation covariance H B H^T + R is singular (cond = {cond:.3e})", condition=cond
        ) from None
    # K = B H^T S^-1 = (S^-1 H B)^T since B and S are symmetric
    return sla.cho_solve(cf, HB).T


def kalman_gain(B, R, H):
    """``K = B H^T (H B H^T + R)^-1`` from a Cholesky solve."""
    B = _dense_cov(B, "B")
    R = _dense_cov(R, "R")
    H = np.atleast_2d(as_dense_operator(H))
    _check_dims(B, R, H)
    return _gain(B, R, H)


@dataclass
class AnalysisResult:
    analysis: np.ndarray
    gain: np.ndarray
    cost_background: float
    cost_observation: float


@dataclass
class BatchAnalysis:
    """Analyses of several ``(x_b, y)`` pairs sharing one ``(B, R, H)``.

    ``cost_background[m]`` and ``cost_observation[m]`` are ``J_b(x_a)`` and
    ``J_o(x_a)`` for pair ``m``; the traces are those of the common gain.
    """

    analyses: np.ndarray
    gain: np.ndarray
    cost_background: np.ndarray
    cost_observation: np.ndarray
    tr_KH: float
    tr_ImHK: float


def _traces(K, H):
    tr_hk = float(np.einsum("ij,ji->", H, K))
    return tr_hk, H.shape[0] - tr_hk


def analyse_batch(backgrounds, observations, B, R, H):
    """BLUE analyses and cost terms for every row of ``backgrounds``/``observations``.

    ``J_b(x_a) = 1/2 (x_a - x_b)^T B^-1 (x_a - x_b)`` and
    ``J_o(x_a) = 1/2 (y - H x_a)^T R^-1 (y - H x_a)``, the two terms of the
    3D-Var cost evaluated at the analysis.
    """
    B = _dense_cov(B, "B")
    R = _dense_cov(R, "R")
    H = np.atleast_2d(as_dense_operator(H))
    _check_dims(B, R, H)
    Xb = np.atleast_2d(np.asarray(backgrounds, dtype=float))
    Y = np.atleast_2d(np.asarray(observations, dtype=float))
    if Xb.shape[1] != H.shape[1] or Y.shape[1] != H.shape[0] or Xb.shape[0] != Y.shape[0]:
        raise DomainError(
            f"pair arrays {Xb.shape} / {Y.shape} inconsistent with H of shape {H.shape}"
        )
    K = _gain(B, R, H)
    D = Y - Xb @ H.T
    Xa = Xb + D @ K.T
    inc = Xa - Xb
    res = Y - Xa @ H.T
    jb = 0.5 * np.einsum("ij,ji->i", inc, sla.cho_solve(_cho(B, "B"), inc.T))
    jo = 0.5 * np.einsum("ij,ji->i", res, sla.cho_solve(_cho(R, "R"), res.T))
    tr_kh, tr_imhk = _traces(K, H)
    return BatchAnalysis(Xa, K, jb, jo, tr_kh, tr_imhk)


def blue_analysis(x_b, y, B, R, H):
    """Single-pair BLUE: ``x_a = x_b + K (y - H x_b)`` with its cost terms."""
    x_b = as_vector(x_b, "x_b")
    y = as_vector(y, "y")
    out = analyse_batch(x_b[None, :], y[None, :], B, R, H)
    return AnalysisResult(
        analysis=out.analyses[0],
        gain=out.gain,
        cost_background=float(out.cost_background[0]),
        cost_observation=float(out.cost_observation[0]),
    )


def cost(x, x_b, y, B, R, H):
    """3D-Var cost ``J(x) = J_b(x) + J_o(x)`` and its gradient."""
    B = _dense_cov(B, "B")
    R = _dense_cov(R, "R")
    H = np.atleast_2d(as_dense_operator(H))
    dx = np.asarray(x, float) - np.asarray(x_b, float)
    r = np.asarray(y, float) - H @ np.asarray(x, float)
    Bi_dx = sla.cho_solve(_cho(B, "B"), dx)
    Ri_r = sla.cho_solve(_cho(R, "R"), r)
    value = 0.5 * dx @ Bi_dx + 0.5 * r @ Ri_r
    grad = Bi_dx - H.T @ Ri_r
    return float(value), grad


def trace_identities(B, R, H):
    """Return ``(Tr(K H), Tr(I - H K))`` with ``I`` of order n_y."""
    H = np.atleast_2d(as_dense_operator(H))
    K = kalman_gain(B, R, H)
    return _traces(K, H)
