"""Observation-to-cluster assignment and per-cluster subproblems.

Observations whose dependence straddles several state clusters are handled
in one of two ways:

reduction
    straddling observations are dropped from tuning;
adjustment
    a straddling observation keeps only its strongest cluster and the
    contribution of the other clusters is subtracted using the background
    ensemble mean, ``y_l - sum_{k outside} H_lk mean_b[x_k]``.

"Strongest" is the cluster carrying the largest row mass
``sum_{k in cluster} |H_lk|``; ties go to the lower cluster id.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import CovarianceModel, as_dense_operator
from .errors import DomainError, StrategyError

log = logging.getLogger(__name__)

SINGLE = "single"
STRADDLING = "straddling"
EMPTY = "empty"

STRATEGIES = ("reduction", "adjustment")


@dataclass(frozen=True, eq=False)
class ObservationAssignment:
    """Per-observation status, touched clusters and strongest cluster.

    ``strongest[k]`` is 0 for empty rows. ``mass[k, c - 1]`` is the row mass
    of observation ``k`` on cluster ``c``.
    """

    status: tuple
    touched: tuple
    strongest: np.ndarray
    mass: np.ndarray

    @property
    def n_obs(self):
        return len(self.status)

    def indices(self, status):
        return np.array([k for k, s in enumerate(self.status) if s == status], dtype=int)

    def report(self):
        return [
            {
                "index": k,
                "status": self.status[k],
                "clusters": list(self.touched[k]),
                "strongest": int(self.strongest[k]) if self.status[k] != EMPTY else None,
            }
            for k in range(self.n_obs)
        ]


@dataclass(frozen=True)
class SelectionOperator:
    """Binary selection of ``indices`` (strictly increasing) out of ``size``."""

    indices: np.ndarray
    size: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=int)
        object.__setattr__(self, "indices", idx)
        if idx.ndim != 1:
            raise DomainError("selection indices must be a vector")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.size or np.any(np.diff(idx) <= 0)):
            raise DomainError("selection indices must be strictly increasing and in range")

    def __len__(self):
        return self.indices.size

    def matrix(self):
        Phi = np.zeros((self.indices.size, self.size))
        Phi[np.arange(self.indices.size), self.indices] = 1.0
        return Phi

    def apply(self, v):
        """Select along the last axis."""
        return np.asarray(v)[..., self.indices]


def _cluster_mass(H, part, zero_tol):
    A = np.abs(H)
    A = np.where(A > zero_tol, A, 0.0)
    onehot = np.zeros((part.labels.size, part.p))
    onehot[np.arange(part.labels.size), part.labels - 1] = 1.0
    return A @ onehot


def classify_observations(H, part, zero_tol=0.0):
    """Label each observation single, straddling or empty against ``part``."""
    H = as_dense_operator(H)
    if part.labels.size != H.shape[1]:
        raise DomainError(f"partition covers {part.labels.size} states, H has {H.shape[1]}")
    mass = _cluster_mass(H, part, zero_tol)
    status, touched = [], []
    strongest = np.zeros(H.shape[0], dtype=int)
    for k, row in enumerate(mass):
        hit = tuple(int(c) + 1 for c in np.flatnonzero(row > 0))
        touched.append(hit)
        if not hit:
            status.append(EMPTY)
            continue
        status.append(SINGLE if len(hit) == 1 else STRADDLING)
        strongest[k] = int(np.argmax(row)) + 1
    empty = [k for k, s in enumerate(status) if s == EMPTY]
    if empty:
        log.warning("observations with no dependence excluded: %s", empty)
    return ObservationAssignment(tuple(status), tuple(touched), strongest, mass)


def _selections(assignment, rows, p):
    rows = np.asarray(rows, dtype=int)
    owner = assignment.strongest[rows]
    return {c: SelectionOperator(rows[owner == c], assignment.n_obs) for c in range(1, p + 1)}


@dataclass(frozen=True, eq=False)
class Reduction:
    """Kept rows, the reduced operator and per-cluster observation selections."""

    kept: np.ndarray
    operator: np.ndarray
    selections: dict
    assignment: ObservationAssignment

    @property
    def missing(self):
        """Clusters left without any observation."""
        return [c for c, s in self.selections.items() if len(s) == 0]


def reduce_observations(H, part, zero_tol=0.0, assignment=None):
    """Drop straddling (and empty) observations."""
    H = as_dense_operator(H)
    assignment = assignment or classify_observations(H, part, zero_tol)
    kept = assignment.indices(SINGLE)
    red = Reduction(kept, H[kept], _selections(assignment, kept, part.p), assignment)
    for c in red.missing:
        log.warning("cluster %d keeps no observation under reduction", c)
    return red


@dataclass(frozen=True, eq=False)
class Adjustment:
    """Adjusted observations ``y_hat``, operator ``H_hat`` and selections.

    ``shift`` is the amount subtracted from each observation, identical for
    every pair of an ensemble since it only uses the background mean.
    """

    observations: np.ndarray
    operator: np.ndarray
    selections: dict
    shift: np.ndarray
    assignment: ObservationAssignment

    @property
    def missing(self):
        return [c for c, s in self.selections.items() if len(s) == 0]


def adjust_observations(H, part, background_ensemble, y, zero_tol=0.0, assignment=None):
    """Reassign straddling observations to their strongest cluster.

    ``background_ensemble`` is an ``(N, n_x)`` array (or list of vectors);
    ``y`` is one observation vector or an ``(N, n_y)`` stack.
    """
    H = as_dense_operator(H)
    ens = np.atleast_2d(np.asarray(background_ensemble, dtype=float))
    if ens.size == 0 or ens.shape[0] == 0:
        raise DomainError("background ensemble is empty")
    if ens.shape[1] != H.shape[1]:
        raise DomainError(f"ensemble members have length {ens.shape[1]}, H expects {H.shape[1]}")
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != H.shape[0]:
        raise DomainError(f"observations have length {y.shape[-1]}, H expects {H.shape[0]}")
    assignment = assignment or classify_observations(H, part, zero_tol)
    mean_b = ens.mean(axis=0)

    H_hat = H.copy()
    shift = np.zeros(H.shape[0])
    for l in assignment.indices(STRADDLING):
        outside = part.labels != assignment.strongest[l]
        shift[l] = H[l, outside] @ mean_b[outside]
        H_hat[l, outside] = 0.0
    used = np.concatenate([assignment.indices(SINGLE), assignment.indices(STRADDLING)])
    used.sort()
    return Adjustment(y - shift, H_hat, _selections(assignment, used, part.p), shift, assignment)


@dataclass(frozen=True, eq=False)
class LocalProblem:
    """Data of cluster ``cluster`` restricted by its selection operators."""

    cluster: int
    state_index: np.ndarray
    obs_index: np.ndarray
    backgrounds: np.ndarray
    observations: np.ndarray
    B: CovarianceModel
    R: CovarianceModel
    H: np.ndarray


def extract_subproblem(cluster, part, selections, x_b, y, B, R, H_prime):
    """Restrict ``(x_b, y, B, R, H')`` to cluster ``cluster``.

    ``selections`` maps cluster ids to observation :class:`SelectionOperator`
    (from :func:`reduce_observations` or :func:`adjust_observations`);
    ``y`` and ``H_prime`` must be the matching full-length observations
    (``y`` or ``y_hat``) and operator (``H``, ``H_tilde`` rows in full
    layout, or ``H_hat``). ``x_b``/``y`` may be single vectors or stacks.

    Raises
    ------
    StrategyError
        If the cluster has no state or no assigned observation.
    """
    H_prime = as_dense_operator(H_prime)
    states = part.members(cluster)
    if states.size == 0:
        raise StrategyError(f"cluster {cluster} has no state", cluster=cluster)
    sel = selections.get(cluster)
    if sel is None or len(sel) == 0:
        raise StrategyError(f"cluster {cluster} has no assigned observation", cluster=cluster)
    if not isinstance(B, CovarianceModel):
        B = CovarianceModel.from_matrix(B)
    if not isinstance(R, CovarianceModel):
        R = CovarianceModel.from_matrix(R)
    obs = sel.indices
    return LocalProblem(
        cluster=cluster,
        state_index=states,
        obs_index=obs,
        backgrounds=np.asarray(x_b, dtype=float)[..., states],
        observations=np.asarray(y, dtype=float)[..., obs],
        B=B.restrict(states),
        R=R.restrict(obs),
        H=H_prime[np.ix_(obs, states)],
    )


def strategy_summary(part, selections):
    """Table-style sizes: ``|x^i|``, ``|y^i|`` and totals."""
    sizes = part.sizes.tolist()
    obs = [len(selections[c]) for c in range(1, part.p + 1)]
    return {
        "state_sizes": sizes,
        "obs_sizes": obs,
        "n_states": int(sum(sizes)),
        "n_obs": int(sum(obs)),
    }
