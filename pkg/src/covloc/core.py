"""Covariance primitives, the observation operator wrapper and seeded sampling.

Covariances are kept decomposed as a variance vector plus a correlation
matrix, ``Cov = D^1/2 C D^1/2``. Tuning only ever rescales the variance
vector, so the correlation array handed in is the one handed back.

Random streams use numpy's ``Philox`` counter-based bit generator. Child
streams are derived with ``numpy.random.SeedSequence`` spawn keys, so a
stream is a pure function of ``(root_seed, *key)`` and is portable across
platforms.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DomainError, FactorizationError

log = logging.getLogger(__name__)

#: Fill ratio above which an observation operator is held dense.
DENSE_FILL_RATIO = 0.25


def make_rng(seed, *key):
    """Return a ``Generator`` for the stream ``(seed, *key)``.

    The same arguments always produce the same stream. Distinct keys give
    statistically independent streams (SeedSequence spawn-key hashing).
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def as_vector(values, name="vector"):
    """Validate and return a finite, non-empty 1-D float array."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# Observation operator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationOperator:
    """Linearized observation operator ``H`` (n_y x n_x).

    Held as a dense array when more than 25% of entries are nonzero and as
    CSR otherwise. Linear algebra always goes through :meth:`dense`.
    """

    matrix: np.ndarray | sp.csr_matrix

    @classmethod
    def from_array(cls, H):
        if isinstance(H, ObservationOperator):
            return H
        if sp.issparse(H):
            M = sp.csr_matrix(H, dtype=float)
            data = M.data
            shape = M.shape
            nnz = M.count_nonzero()
        else:
            M = np.array(H, dtype=float, copy=True)
            if M.ndim != 2:
                raise DomainError(f"H must be 2-D, got shape {M.shape}")
            data = M
            shape = M.shape
            nnz = np.count_nonzero(M)
        if shape[0] == 0 or shape[1] == 0:
            raise DomainError(f"H must be non-empty, got shape {shape}")
        if not np.all(np.isfinite(data)):
            raise DomainError("H has non-finite entries")
        fill = nnz / (shape[0] * shape[1])
        if fill > DENSE_FILL_RATIO:
            M = M.toarray() if sp.issparse(M) else M
        else:
            M = sp.csr_matrix(M)
        return cls(M)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def is_sparse(self):
        return sp.issparse(self.matrix)

    def dense(self):
        if self.is_sparse:
            return self.matrix.toarray()
        return self.matrix

    def empty_rows(self, zero_tol=0.0):
        """Indices of observations with no entry above ``zero_tol``."""
        A = np.abs(self.dense())
        return np.flatnonzero(~np.any(A > zero_tol, axis=1))


def as_dense_operator(H):
    """Dense float copy-free view of ``H`` whatever its container."""
    if isinstance(H, ObservationOperator):
        return H.dense()
    if sp.issparse(H):
        return H.toarray()
    arr = np.asarray(H, dtype=float)
    if arr.ndim != 2:
        raise DomainError(f"H must be 2-D, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Covariance model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    """Covariance stored as variances ``D`` and correlation ``C``.

    ``correlation`` is never copied by the scaling and restriction helpers
    below (restriction necessarily builds a sub-array), which is what makes
    "correlations untouched by tuning" checkable with ``is``/``array_equal``.
    """

    variances: np.ndarray
    correlation: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float)
        C = np.asarray(self.correlation, dtype=float)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "correlation", C)
        if not self.check:
            return
        if v.ndim != 1 or v.size == 0:
            raise DomainError(f"variances must be a non-empty vector, got shape {v.shape}")
        if C.shape != (v.size, v.size):
            raise DomainError(f"correlation shape {C.shape} does not match {v.size} variances")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise DomainError("variances must be finite and strictly positive")
        if not np.all(np.isfinite(C)):
            raise DomainError("correlation has non-finite entries")
        if np.max(np.abs(np.diag(C) - 1.0)) > 1e-12:
            raise DomainError("correlation must have unit diagonal")
        if not np.array_equal(C, C.T):
            if np.max(np.abs(C - C.T)) > 1e-12:
                raise DomainError("correlation must be symmetric")

    @classmethod
    def homogeneous(cls, sigma, correlation):
        """``sigma**2 * C`` as a decomposed model."""
        if sigma <= 0:
            raise DomainError(f"standard deviation must be positive, got {sigma}")
        C = np.asarray(correlation, dtype=float)
        return cls(np.full(C.shape[0], float(sigma) ** 2), C)

    @classmethod
    def from_matrix(cls, cov):
        """Split a dense covariance into variances and correlation."""
        cov = np.asarray(cov, dtype=float)
        v = np.diag(cov).copy()
        if np.any(v <= 0):
            raise DomainError("covariance has a non-positive variance")
        s = np.sqrt(v)
        C = cov / np.outer(s, s)
        C = 0.5 * (C + C.T)
        np.fill_diagonal(C, 1.0)
        return cls(v, C)

    @property
    def size(self):
        return self.variances.size

    @property
    def deviations(self):
        return np.sqrt(self.variances)

    def compose(self):
        return compose_covariance(self)

    def scaled(self, factors):
        """Multiply the variances by ``factors`` (scalar or per-entry)."""
        v = self.variances * factors
        return CovarianceModel(v, self.correlation, check=False)

    def restrict(self, index):
        """Sub-model ``Phi Cov Phi^T`` for the selected indices."""
        index = np.asarray(index, dtype=int)
        return CovarianceModel(
            self.variances[index], self.correlation[np.ix_(index, index)], check=False
        )


def compose_covariance(model):
    """Return ``D^1/2 C D^1/2`` as a dense symmetric matrix."""
    v = np.asarray(model.variances, dtype=float)
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise DomainError("non-positive variance in covariance model")
    s = np.sqrt(v)
    cov = model.correlation * s[:, None] * s[None, :]
    # elementwise products are symmetric up to rounding in C itself
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class JitterPolicy:
    """Diagonal jitter schedule used when a plain Cholesky fails.

    Jitter levels tried are ``start * growth**k * max(diag)`` for
    ``k = 0..escalations``; the defaults end at ``1e-8 * max(diag)``.
    """

    start: float = 1e-11
    growth: float = 10.0
    escalations: int = 3

    @classmethod
    def strict(cls):
        return cls(escalations=-1)

    def levels(self):
        return [self.start * self.growth**k for k in range(self.escalations + 1)]


def factor_covariance(cov, jitter_policy=None):
    """Lower-triangular ``L`` with ``L L^T = cov`` (plus at most the policy jitter).

    Raises
    ------
    FactorizationError
        If ``cov`` is not positive definite even after the last jitter level.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DomainError(f"covariance must be square, got shape {cov.shape}")
    policy = JitterPolicy() if jitter_policy is None else jitter_policy
    try:
        return sla.cholesky(cov, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        pass
    scale = float(np.max(np.abs(np.diag(cov)))) or 1.0
    eye = np.eye(cov.shape[0])
    for level in policy.levels():
        try:
            L = sla.cholesky(cov + level * scale * eye, lower=True)
        except np.linalg.LinAlgError:
            continue
        log.debug("cholesky needed jitter %.1e x max diag", level)
        return L
    raise FactorizationError(
        f"matrix of order {cov.shape[0]} is not positive definite "
        f"(jitter up to {policy.levels()[-1] if policy.levels() else 0:.1e} x max diag)"
    )


class GaussianSampler:
    """Draws ``mean + L z`` with ``z`` standard normal from a seeded stream.

    A sampler owns its generator; give each thread its own sampler, derived
    with :func:`make_rng`-style keys from a root seed.
    """

    def __init__(self, mean, factor, rng_seed, key=()):
        self.mean = np.asarray(mean, dtype=float)
        self.factor = np.asarray(factor, dtype=float)
        if self.factor.shape != (self.mean.size, self.mean.size):
            raise DomainError(
                f"factor shape {self.factor.shape} does not match mean length {self.mean.size}"
            )
        self.rng_seed = int(rng_seed)
        self._rng = make_rng(self.rng_seed, *key)

    def draw(self, count):
        """Return a ``(count, n)`` array of samples."""
        if count < 0:
            raise DomainError("count must be non-negative")
        z = self._rng.standard_normal((count, self.mean.size))
        return self.mean + z @ self.factor.T


def sample_gaussian(sampler, count):
    """List of ``count`` sample vectors; empty for ``count == 0``."""
    return list(sampler.draw(count))


def balgovind_correlation(n, length):
    """Balgovind (Matern 3/2) correlation on a unit-spaced 1-D index grid.

    ``C_ij = (1 + r/L) exp(-r/L)`` with ``r = |i - j|``.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    if not length > 0:
        raise DomainError(f"correlation length must be positive, got {length}")
    idx = np.arange(n, dtype=float)
    r = np.abs(idx[:, None] - idx[None, :]) / float(length)
    return (1.0 + r) * np.exp(-r)
