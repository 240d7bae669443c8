"""Graph-clustering localization for DI01 covariance tuning."""

__version__ = "0.1.0"

from .assimilate import analyse_batch, blue_analysis, cost, kalman_gain, trace_identities
from .core import (
    CovarianceModel,
    GaussianSampler,
    JitterPolicy,
    ObservationOperator,
    balgovind_correlation,
    factor_covariance,
    make_rng,
)
from .errors import (
    CovlocError,
    DegenerateGeometryError,
    DomainError,
    FactorizationError,
    FormatError,
    NumericalError,
    StrategyError,
)
from .localize import adjust_observations, classify_observations, extract_subproblem, reduce_observations
from .netgraph import (
    ClusterPartition,
    StateNetwork,
    build_adjacency,
    fluid_communities,
    partition_performance,
    select_cluster_count,
)
from .tune import InnovationEnsemble, TuningTrace, di01_global, di01_localized, di01_step
from .twinlab import ExperimentConfig, TwinSystem, generate_jacobian, run_cell, run_grid
