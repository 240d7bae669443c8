"""Twin experiments: synthetic Jacobians, error ensembles and gain grids.

A block-structured binary ``H`` is drawn, shuffled to hide the blocks,
clustered once, and then every grid cell ``(sigma_bE, sigma_oE)`` runs
global DI01, localized DI01 with reduction and localized DI01 with
adjustment from the same assumed covariances and the same ensemble. The
gain of a localized method over the global one is

    gamma = (Delta_global - Delta_local) / Delta_global,
    Delta = E || M_tuned - M_exact ||_F,

with the expectation estimated over Monte Carlo repetitions before the
ratio is formed.

Seeding: every random draw comes from ``make_rng(root_seed, *key)``.
Generation uses key ``(0, attempt)``, cluster detection ``(2, ...)`` and
repetition ``r`` of grid cell ``(i, j)`` uses ``(1, i, j, r, stream)``.
Cells therefore do not depend on evaluation order or worker count.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.linalg as sla

from .core import CovarianceModel, GaussianSampler, balgovind_correlation, make_rng
from .errors import CovlocError, DomainError
from .localize import adjust_observations, classify_observations, reduce_observations, strategy_summary
from .netgraph import build_adjacency, fluid_communities, partition_performance, select_cluster_count
from .tune import InnovationEnsemble, di01_global, di01_localized

log = logging.getLogger(__name__)

SCHEMA = "covloc.experiment/1"
METHODS = ("global", "reduction", "adjustment")
MATRICES = ("B", "R")
LOCAL_METHODS = ("reduction", "adjustment")
QUADRANTS = (
    ("bA<bE", "oA<oE"),
    ("bA<bE", "oA>oE"),
    ("bA>bE", "oA<oE"),
    ("bA>bE", "oA>oE"),
)


@dataclass
class ExperimentConfig:
    """Twin-experiment settings; defaults follow the reference setup.

    ``grid_spacing`` is ``"geometric"`` (default, puts the assumed 0.05 at
    the centre of [0.025, 0.1] for odd sizes) or ``"linear"``. ``p`` is a
    fixed cluster count or ``"auto"`` for elbow selection.
    """

    n_x: int = 100
    n_y: int = 50
    state_cluster_sizes: list = field(default_factory=lambda: [50, 50])
    obs_cluster_sizes: list = field(default_factory=lambda: [25, 25])
    p_intra: float = 0.15
    p_cross: float = 0.01
    shuffle: bool = True
    balgovind_length: float = 10.0
    sigma_bA: float = 0.05
    sigma_oA: float = 0.05
    grid_min: float = 0.025
    grid_max: float = 0.1
    grid_size: int = 7
    grid_spacing: str = "geometric"
    ratio: float = 10.0
    n_pairs: int = 10
    repetitions: int = 100
    q_max: int = 10
    rel_tol: float = 1e-3
    root_seed: int = 0
    workers: int = 1
    p: object = "auto"
    p_max: int = 8
    seeds_per_p: int = 10
    tau: float = 0.25
    weighted: bool = True
    zero_tol: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        if sum(self.state_cluster_sizes) != self.n_x:
            problems.append("state_cluster_sizes must sum to n_x")
        if sum(self.obs_cluster_sizes) != self.n_y:
            problems.append("obs_cluster_sizes must sum to n_y")
        if len(self.state_cluster_sizes) != len(self.obs_cluster_sizes):
            problems.append("state and observation cluster counts differ")
        if any(s < 1 for s in list(self.state_cluster_sizes) + list(self.obs_cluster_sizes)):
            problems.append("cluster sizes must be positive")
        for name in ("p_intra", "p_cross"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        for name in ("sigma_bA", "sigma_oA", "grid_min", "grid_max", "balgovind_length", "ratio"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.grid_max < self.grid_min:
            problems.append("grid_max must be >= grid_min")
        if self.grid_spacing not in ("geometric", "linear"):
            problems.append("grid_spacing must be 'geometric' or 'linear'")
        if len(self.obs_cluster_sizes) != 2 and self.ratio != 1:
            problems.append("ratio != 1 needs exactly two observation clusters")
        for name in ("grid_size", "n_pairs", "repetitions", "q_max", "workers", "seeds_per_p"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        if self.p != "auto" and not (isinstance(self.p, int) and self.p >= 1):
            problems.append("p must be 'auto' or a positive integer")
        if problems:
            raise DomainError("; ".join(problems))

    @classmethod
    def from_dict(cls, data):
        """Build from a JSON mapping; unknown keys are errors.

        An optional ``"schema"`` key must equal :data:`SCHEMA`.
        """
        data = dict(data)
        schema = data.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise DomainError(f"unsupported schema {schema!r}; expected {SCHEMA!r}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise DomainError("unknown config keys: " + ", ".join(unknown))
        return cls(**data)

    def to_dict(self):
        return {"schema": SCHEMA, **asdict(self)}

    def grid(self):
        if self.grid_spacing == "geometric":
            return np.geomspace(self.grid_min, self.grid_max, self.grid_size)
        return np.linspace(self.grid_min, self.grid_max, self.grid_size)


@dataclass(frozen=True, eq=False)
class PlantedStructure:
    """Block labels (1-based, after shuffling) used to build ``H``.

    ``state_positions[k]`` is the pre-shuffle position of presented state
    ``k`` (likewise for observations); pseudo-spatial distances for the
    correlation kernels are measured between these positions.
    """

    state_labels: np.ndarray
    obs_labels: np.ndarray
    state_positions: np.ndarray
    obs_positions: np.ndarray


def generate_jacobian(cfg, seed=None, max_retries=100):
    """Binary block ``H`` with hidden structure, plus its planted labels."""
    seed = cfg.root_seed if seed is None else seed
    xs = np.repeat(np.arange(1, len(cfg.state_cluster_sizes) + 1), cfg.state_cluster_sizes)
    ys = np.repeat(np.arange(1, len(cfg.obs_cluster_sizes) + 1), cfg.obs_cluster_sizes)
    prob = np.where(ys[:, None] == xs[None, :], cfg.p_intra, cfg.p_cross)
    for attempt in range(max_retries):
        rng = make_rng(seed, 0, attempt)
        H = (rng.random(prob.shape) < prob).astype(float)
        if cfg.shuffle:
            row_perm = rng.permutation(cfg.n_y)
            col_perm = rng.permutation(cfg.n_x)
        else:
            row_perm = np.arange(cfg.n_y)
            col_perm = np.arange(cfg.n_x)
        H = H[np.ix_(row_perm, col_perm)]
        if np.all(H.any(axis=1)):
            return H, PlantedStructure(xs[col_perm], ys[row_perm], col_perm, row_perm)
        log.debug("attempt %d produced an empty observation row; resampling", attempt)
    raise DomainError(f"no valid H after {max_retries} attempts")


def observation_deviations(sigma_oE, ratio, obs_labels):
    """Per-observation exact deviations.

    Cluster 1 gets ``sigma_oE * sqrt(ratio)`` and cluster 2
    ``sigma_oE / sqrt(ratio)``, so their ratio is ``ratio`` and their
    geometric mean ``sigma_oE``.
    """
    if not (sigma_oE > 0 and ratio > 0):
        raise DomainError("deviations and ratio must be positive")
    root = math.sqrt(ratio)
    return np.where(obs_labels == 1, sigma_oE * root, sigma_oE / root)


@dataclass(eq=False)
class TwinSystem:
    """A generated ``H`` with everything reused across grid cells."""

    cfg: ExperimentConfig
    H: np.ndarray
    planted: PlantedStructure
    partition: object = None
    selection_curve: list = None
    C_B: np.ndarray = None
    C_R: np.ndarray = None
    chol_C_B: np.ndarray = None
    chol_C_R: np.ndarray = None

    @classmethod
    def build(cls, cfg, seed=None, partition=None):
        seed = cfg.root_seed if seed is None else seed
        H, planted = generate_jacobian(cfg, seed)
        sys = cls(cfg, H, planted)
        # the shuffle relabels variables, so correlations follow them
        xp, yp = planted.state_positions, planted.obs_positions
        sys.C_B = balgovind_correlation(cfg.n_x, cfg.balgovind_length)[np.ix_(xp, xp)]
        sys.C_R = balgovind_correlation(cfg.n_y, cfg.balgovind_length)[np.ix_(yp, yp)]
        sys.chol_C_B = sla.cholesky(sys.C_B, lower=True)
        sys.chol_C_R = sla.cholesky(sys.C_R, lower=True)
        if partition is None:
            partition, curve = detect_partition(H, cfg, seed)
            sys.selection_curve = curve
        sys.partition = partition
        return sys

    def exact_covariances(self, sigma_bE, sigma_oE, ratio=None):
        ratio = self.cfg.ratio if ratio is None else ratio
        B_E = CovarianceModel.homogeneous(sigma_bE, self.C_B)
        dev = observation_deviations(sigma_oE, ratio, self.planted.obs_labels)
        R_E = CovarianceModel(dev**2, self.C_R, check=False)
        return B_E, R_E

    def assumed_covariances(self):
        return (
            CovarianceModel.homogeneous(self.cfg.sigma_bA, self.C_B),
            CovarianceModel.homogeneous(self.cfg.sigma_oA, self.C_R),
        )


def detect_partition(H, cfg, seed):
    """Cluster the state network of ``H`` once, per ``cfg.p``."""
    net = build_adjacency(H, cfg.zero_tol)
    if cfg.p == "auto":
        sel = select_cluster_count(
            net, p_max=cfg.p_max, seeds_per_p=cfg.seeds_per_p, tau=cfg.tau, seed=(seed, 2), weighted=cfg.weighted
        )
        return sel.partitions[sel.p_star], sel.curve
    best, best_q = None, -1.0
    for s in range(cfg.seeds_per_p):
        part = fluid_communities(net, cfg.p, seed=(seed, 2, cfg.p, s), weighted=cfg.weighted)
        q = partition_performance(net, part).performance
        if q > best_q:
            best, best_q = part, q
    return best, [(cfg.p, best_q, best_q)]


def generate_ensemble(system, sigma_bE, sigma_oE, seed, key=(), x_t=None, n_pairs=None):
    """Draw ``n_pairs`` pairs ``x_b = x_t + eps_b``, ``y = H x_t + eps_y``.

    Returns ``(ensemble, B_E, R_E)``. ``x_t`` defaults to zero.
    """
    cfg = system.cfg
    n_pairs = cfg.n_pairs if n_pairs is None else n_pairs
    B_E, R_E = system.exact_covariances(sigma_bE, sigma_oE)
    x_t = np.zeros(cfg.n_x) if x_t is None else np.asarray(x_t, dtype=float)
    # chol(D^1/2 C D^1/2) = D^1/2 chol(C)
    L_B = sigma_bE * system.chol_C_B
    L_R = np.sqrt(R_E.variances)[:, None] * system.chol_C_R
    sb = GaussianSampler(x_t, L_B, seed, key=(*key, 0))
    so = GaussianSampler(system.H @ x_t, L_R, seed, key=(*key, 1))
    return InnovationEnsemble(sb.draw(n_pairs), so.draw(n_pairs)), B_E, R_E


@dataclass
class CellRun:
    """One Monte Carlo repetition of a grid cell."""

    tuned: dict
    deltas: dict
    errors: dict


def _frobenius_gap(M, E):
    return float(np.linalg.norm(M.compose() - E.compose()))


def run_cell(system, sigma_bE, sigma_oE, seed, key=(), x_t=None):
    """Run the three tuning methods on one fresh ensemble.

    ``deltas[(method, matrix)]`` is ``||M_tuned - M_E||_F``; a method that
    fails records its error message and NaN deltas.
    """
    cfg = system.cfg
    ens, B_E, R_E = generate_ensemble(system, sigma_bE, sigma_oE, seed, key, x_t=x_t)
    B_A, R_A = system.assumed_covariances()
    tuned, deltas, errors = {}, {}, {}
    for method in METHODS:
        try:
            if method == "global":
                out = di01_global(ens, B_A, R_A, system.H, cfg.q_max, cfg.rel_tol)
            else:
                out = di01_localized(
                    ens, B_A, R_A, system.H, system.partition, method, cfg.q_max, cfg.rel_tol, cfg.zero_tol
                )
        except CovlocError as exc:
            errors[method] = f"{type(exc).__name__}: {exc}"
            deltas[(method, "B")] = deltas[(method, "R")] = math.nan
            continue
        tuned[method] = out
        deltas[(method, "B")] = _frobenius_gap(out[0], B_E)
        deltas[(method, "R")] = _frobenius_gap(out[1], R_E)
    return CellRun(tuned, deltas, errors)


def gain(delta_global, delta_local):
    """``(Delta_global - Delta_local) / Delta_global``."""
    return (delta_global - delta_local) / delta_global


def _gain_with_se(dg, dl):
    """Gain of the repetition means and its delta-method standard error."""
    ok = np.isfinite(dg) & np.isfinite(dl)
    dg, dl = dg[ok], dl[ok]
    n = dg.size
    if n == 0:
        return math.nan, math.nan
    mg, ml = dg.mean(), dl.mean()
    g = gain(mg, ml)
    if n < 2 or mg == 0:
        return g, math.nan
    resid = dl - (ml / mg) * dg
    return g, float(np.std(resid, ddof=1) / math.sqrt(n) / mg)


def _cell_task(args):
    system, i, j, sb, so = args
    cfg = system.cfg
    reps = cfg.repetitions
    d = {k: np.full(reps, math.nan) for k in ((m, M) for m in METHODS for M in MATRICES)}
    errors = []
    for r in range(reps):
        run = run_cell(system, sb, so, cfg.root_seed, key=(1, i, j, r))
        for k, v in run.deltas.items():
            d[k][r] = v
        errors += [f"rep {r} {m}: {msg}" for m, msg in run.errors.items()]
    row = {"i": i, "j": j, "sigma_bE": float(sb), "sigma_oE": float(so)}
    for m in LOCAL_METHODS:
        for M in MATRICES:
            g, se = _gain_with_se(d[("global", M)], d[(m, M)])
            row[f"gamma_{M}_{m}"] = g
            row[f"se_gamma_{M}_{m}"] = se
    for m in METHODS:
        for M in MATRICES:
            x = d[(m, M)]
            x = x[np.isfinite(x)]
            row[f"delta_{M}_{m}"] = float(x.mean()) if x.size else math.nan
            row[f"se_delta_{M}_{m}"] = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan
    row["errors"] = errors
    return row


GAMMA_COLUMNS = [f"gamma_{M}_{m}" for m in LOCAL_METHODS for M in MATRICES]
CSV_COLUMNS = (
    ["sigma_bE", "sigma_oE"]
    + GAMMA_COLUMNS
    + ["se_" + c for c in GAMMA_COLUMNS]
    + [f"delta_{M}_{m}" for m in METHODS for M in MATRICES]
    + [f"se_delta_{M}_{m}" for m in METHODS for M in MATRICES]
)


@dataclass
class GainReport:
    """Per-cell gains and deltas plus partition statistics."""

    cfg: ExperimentConfig
    cells: list
    partition_stats: dict
    selection_curve: list

    def to_csv(self):
        lines = [",".join(CSV_COLUMNS)]
        for row in self.cells:
            lines.append(",".join(format(float(row[c]), ".17g") for c in CSV_COLUMNS))
        return "\n".join(lines) + "\n"

    def quadrant_means(self):
        """Mean gamma per (sign of sigma_A - sigma_E) quadrant, cells on the axes excluded."""
        out = {}
        for m in LOCAL_METHODS:
            for M in MATRICES:
                col = f"gamma_{M}_{m}"
                for qb, qo in QUADRANTS:
                    vals = [
                        row[col]
                        for row in self.cells
                        if _side(self.cfg.sigma_bA, row["sigma_bE"]) == qb[2]
                        and _side(self.cfg.sigma_oA, row["sigma_oE"]) == qo[2]
                        and math.isfinite(row[col])
                    ]
                    out[f"{col}|{qb},{qo}"] = float(np.mean(vals)) if vals else math.nan
        return out

    def summary(self):
        return {
            "config": self.cfg.to_dict(),
            "partition": self.partition_stats,
            "selection_curve": [list(c) for c in self.selection_curve or []],
            "quadrant_means": self.quadrant_means(),
            "cell_errors": {f"{r['i']},{r['j']}": r["errors"] for r in self.cells if r["errors"]},
        }


def _side(assumed, exact):
    if math.isclose(assumed, exact, rel_tol=1e-12):
        return "="
    return "<" if assumed < exact else ">"


def partition_stats(system):
    """Table-style sizes of the detected clusters under both strategies."""
    part = system.partition
    assignment = classify_observations(system.H, part, system.cfg.zero_tol)
    red = reduce_observations(system.H, part, system.cfg.zero_tol, assignment)
    adj = adjust_observations(
        system.H, part, np.zeros((1, system.cfg.n_x)), np.zeros(system.cfg.n_y), system.cfg.zero_tol, assignment
    )
    return {
        "p": part.p,
        "labels": part.labels.tolist(),
        "reduction": strategy_summary(part, red.selections),
        "adjustment": strategy_summary(part, adj.selections),
    }


def run_grid(cfg, system=None):
    """Full gain grid; results do not depend on ``cfg.workers``."""
    system = system or TwinSystem.build(cfg)
    grid = cfg.grid()
    tasks = [(system, i, j, sb, so) for i, sb in enumerate(grid) for j, so in enumerate(grid)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            cells = list(pool.map(_cell_task, tasks))
    else:
        cells = [_cell_task(t) for t in tasks]
    return GainReport(cfg, cells, partition_stats(system), system.selection_curve)
