"""DI01 covariance magnitude tuning, global and per cluster.

Each iteration computes the indicators

    s_b = mean(2 J_b(x_a)) / Tr(K H),    s_o = mean(2 J_o(x_a)) / Tr(I - H K)

over an ensemble of ``(x_b, y)`` pairs and rescales the variances of
``B`` and ``R`` by them. Only variance vectors change; correlation arrays
are passed through untouched, so composed matrices stay positive definite.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .assimilate import analyse_batch
from .core import CovarianceModel, as_dense_operator
from .errors import DegenerateGeometryError, DomainError, StrategyError
from .localize import (
    STRATEGIES,
    adjust_observations,
    classify_observations,
    extract_subproblem,
    reduce_observations,
)

log = logging.getLogger(__name__)

GLOBAL = 0


@dataclass(frozen=True, eq=False)
class InnovationEnsemble:
    """``N`` background/observation pairs stored as ``(N, n_x)`` and ``(N, n_y)``."""

    backgrounds: np.ndarray
    observations: np.ndarray

    def __post_init__(self):
        # C order keeps BLAS rounding independent of how the stack was sliced
        xb = np.ascontiguousarray(np.atleast_2d(np.asarray(self.backgrounds, dtype=float)))
        y = np.ascontiguousarray(np.atleast_2d(np.asarray(self.observations, dtype=float)))
        object.__setattr__(self, "backgrounds", xb)
        object.__setattr__(self, "observations", y)
        if xb.shape[0] < 1 or xb.shape[0] != y.shape[0]:
            raise DomainError(f"need matching non-empty pair stacks, got {xb.shape} and {y.shape}")

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        if not pairs:
            raise DomainError("ensemble needs at least one pair")
        return cls(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))

    def __len__(self):
        return self.backgrounds.shape[0]

    @property
    def pairs(self):
        return list(zip(self.backgrounds, self.observations))


@dataclass(frozen=True)
class TraceRecord:
    cluster: int
    iteration: int
    s_b: float
    s_o: float


@dataclass
class TuningTrace:
    """Indicator history plus the cumulative variance factors.

    ``b_scaling``/``r_scaling`` hold, per state/observation, the product of
    the ``s`` values applied to it (1 where nothing was tuned).
    """

    records: list = field(default_factory=list)
    converged: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    b_scaling: np.ndarray | None = None
    r_scaling: np.ndarray | None = None

    def cluster_records(self, cluster):
        return [r for r in self.records if r.cluster == cluster]

    def to_jsonl(self):
        lines = [
            json.dumps({"cluster": r.cluster, "iteration": r.iteration, "s_b": r.s_b, "s_o": r.s_o})
            for r in self.records
        ]
        lines += [
            json.dumps({"cluster": c, "iteration": None, "skipped": reason})
            for c, reason in sorted(self.skipped.items())
        ]
        return "".join(line + "\n" for line in lines)


def di01_indicators(ens, B, R, H):
    """Per-pair ratios ``2 J_b / Tr(KH)`` and ``2 J_o / Tr(I - HK)``."""
    out = analyse_batch(ens.backgrounds, ens.observations, B, R, H)
    if not (out.tr_KH > 0 and out.tr_ImHK > 0):
        raise DegenerateGeometryError(
            f"non-positive trace denominator: Tr(KH) = {out.tr_KH:.3e}, Tr(I-HK) = {out.tr_ImHK:.3e}"
        )
    return 2.0 * out.cost_background / out.tr_KH, 2.0 * out.cost_observation / out.tr_ImHK


def di01_step(ens, B, R, H):
    """One pair of indicators ``(s_b, s_o)`` under the current ``(B, R)``."""
    rb, ro = di01_indicators(ens, B, R, H)
    return float(rb.mean()), float(ro.mean())


def _iterate(xb, y, B, R, H, cluster, q_max, rel_tol, trace):
    """Run DI01 on one (sub)system; return cumulative ``(prod s_b, prod s_o)``."""
    B0 = B.compose()
    R0 = R.compose()
    ens = InnovationEnsemble(xb, y)
    cum_b = cum_o = 1.0
    converged = False
    for q in range(1, q_max + 1):
        s_b, s_o = di01_step(ens, cum_b * B0, cum_o * R0, H)
        trace.records.append(TraceRecord(cluster, q, s_b, s_o))
        if not (math.isfinite(s_b) and math.isfinite(s_o) and s_b > 0 and s_o > 0):
            trace.converged[cluster] = False
            raise DegenerateGeometryError(
                f"cluster {cluster}, iteration {q}: unusable indicators s_b = {s_b!r}, s_o = {s_o!r}",
                trace=trace,
            )
        cum_b *= s_b
        cum_o *= s_o
        if max(abs(s_b - 1.0), abs(s_o - 1.0)) < rel_tol:
            converged = True
            break
    trace.converged[cluster] = converged
    return cum_b, cum_o


def _check_inputs(B, R, H, q_max):
    if not isinstance(B, CovarianceModel) or not isinstance(R, CovarianceModel):
        raise DomainError("B and R must be CovarianceModel instances")
    if q_max < 1:
        raise DomainError("q_max must be >= 1")
    H = as_dense_operator(H)
    if H.shape != (R.size, B.size):
        raise DomainError(f"H has shape {H.shape}, expected ({R.size}, {B.size})")
    return H


def di01_global(ens, B, R, H, q_max=10, rel_tol=1e-3):
    """Tune the magnitudes of ``B`` and ``R`` with the whole system.

    Stops after ``q_max`` iterations or once both indicators are within
    ``rel_tol`` of one. Returns ``(B', R', trace)``.
    """
    H = _check_inputs(B, R, H, q_max)
    trace = TuningTrace()
    cum_b, cum_o = _iterate(ens.backgrounds, ens.observations, B, R, H, GLOBAL, q_max, rel_tol, trace)
    trace.b_scaling = np.full(B.size, cum_b)
    trace.r_scaling = np.full(R.size, cum_o)
    return B.scaled(cum_b), R.scaled(cum_o), trace


def di01_localized(
    ens,
    B,
    R,
    H,
    part,
    strategy="reduction",
    q_max=10,
    rel_tol=1e-3,
    zero_tol=0.0,
    cluster_order=None,
):
    """Cluster-wise DI01 with reduction or adjustment of straddling observations.

    Clusters are visited in ascending id unless ``cluster_order`` says
    otherwise. For each, DI01 runs on the restricted system and the full
    variances of its states and observations are multiplied by the
    cumulative indicators. Clusters without observations are skipped and
    listed in ``trace.skipped``.
    """
    H = _check_inputs(B, R, H, q_max)
    if strategy not in STRATEGIES:
        raise DomainError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    assignment = classify_observations(H, part, zero_tol)
    if strategy == "reduction":
        out = reduce_observations(H, part, zero_tol, assignment)
        Y, H_prime = ens.observations, H
    else:
        out = adjust_observations(H, part, ens.backgrounds, ens.observations, zero_tol, assignment)
        Y, H_prime = out.observations, out.operator

    trace = TuningTrace()
    b_fac = np.ones(B.size)
    r_fac = np.ones(R.size)
    order = range(1, part.p + 1) if cluster_order is None else cluster_order
    for c in order:
        try:
            lp = extract_subproblem(c, part, out.selections, ens.backgrounds, Y, B, R, H_prime)
        except StrategyError as exc:
            trace.skipped[c] = str(exc)
            log.warning("skipping cluster %d: %s", c, exc)
            continue
        cum_b, cum_o = _iterate(
            lp.backgrounds, lp.observations, lp.B, lp.R, lp.H, c, q_max, rel_tol, trace
        )
        d_b = np.ones(B.size)
        d_b[lp.state_index] = cum_b
        d_r = np.ones(R.size)
        d_r[lp.obs_index] = cum_o
        # B <- D_B^1/2 B D_B^1/2 is a variance rescale
        B = B.scaled(d_b)
        R = R.scaled(d_r)
        b_fac *= d_b
        r_fac *= d_r
    trace.b_scaling = b_fac
    trace.r_scaling = r_fac
    return B, R, trace
