"""Spatio-temporal causal networks for weekly panel data.

Learn two-slice DAG structure by penalized node-averaged likelihood under
spatially correlated, group-heteroscedastic Gaussian noise; diagnose the
fit; answer intervention, attribution, mediation, and counterfactual
queries by simulation.
"""

from .errors import (
    CoordinateBoundsError,
    DegenerateVariogramError,
    DuplicateKeyError,
    ExhaustedDatasetError,
    InvalidFoldsError,
    InvalidInterventionError,
    InvalidSplitError,
    MismatchedScoresError,
    MissingInitialValuesError,
    NonUniformWeeksError,
    NotApplicableError,
    NumericalError,
    RankDeficientError,
    SchemaMismatchError,
    SingularKernelError,
    StcausalError,
    TooFewRowsError,
    UnknownColumnError,
    UnsatisfiableError,
    UnstableSpecError,
)
from .panel import (
    Location,
    PanelDataset,
    VariableSpec,
    default_schema,
    filter_coverage,
    load_panel_csv,
    split_spatial_folds,
    split_temporal,
    write_panel_csv,
)
from .spatial import (
    IDENTITY_KERNEL,
    KernelParams,
    SpatialMatrix,
    Variogram,
    correlation_matrix,
    decorrelate,
    empirical_variogram,
    exp_correlation,
    fit_variogram,
    haversine_km,
    haversine_matrix,
)
from .graphs import (
    AveragedDag,
    ConstraintSet,
    TwoSliceDag,
    Violation,
    consensus_dag,
    default_constraints,
    shd,
    validate_constraints,
)
from .nodefit import FitConfig, NodeEstimate, ResidualPanel, fit_node, gls_fit, node_residuals
from .model import CausalModel, fit_model
from .score import ScoreBreakdown, bayes_factor, log_bayes_factor, pnal_network, pnal_node
from .learn import LocalScoreCache, SearchConfig, bootstrap_average, tabu_learn
from .diagnose import (
    DiagnosticsReport,
    adjust_multiplicity,
    heterogeneity_test,
    misspecification_report,
    morans_i,
    predictive_r2,
    spatial_test,
    temporal_test,
)
from .query import (
    InterventionSpec,
    QueryResult,
    counterfactual,
    intervene,
    mediation_share,
    simulate,
    variance_attribution,
)
from .synthgen import GeneratorSpec, generate, inject_missing

__version__ = "0.1.0"

__all__ = [
    "AveragedDag",
    "CausalModel",
    "ConstraintSet",
    "CoordinateBoundsError",
    "DegenerateVariogramError",
    "DiagnosticsReport",
    "DuplicateKeyError",
    "ExhaustedDatasetError",
    "FitConfig",
    "GeneratorSpec",
    "IDENTITY_KERNEL",
    "InterventionSpec",
    "InvalidFoldsError",
    "InvalidInterventionError",
    "InvalidSplitError",
    "KernelParams",
    "LocalScoreCache",
    "Location",
    "MismatchedScoresError",
    "MissingInitialValuesError",
    "NodeEstimate",
    "NonUniformWeeksError",
    "NotApplicableError",
    "NumericalError",
    "PanelDataset",
    "QueryResult",
    "RankDeficientError",
    "ResidualPanel",
    "SchemaMismatchError",
    "ScoreBreakdown",
    "SearchConfig",
    "SingularKernelError",
    "SpatialMatrix",
    "StcausalError",
    "TooFewRowsError",
    "TwoSliceDag",
    "UnknownColumnError",
    "UnsatisfiableError",
    "UnstableSpecError",
    "VariableSpec",
    "Variogram",
    "Violation",
    "adjust_multiplicity",
    "bayes_factor",
    "bootstrap_average",
    "consensus_dag",
    "correlation_matrix",
    "counterfactual",
    "decorrelate",
    "default_constraints",
    "default_schema",
    "empirical_variogram",
    "exp_correlation",
    "filter_coverage",
    "fit_model",
    "fit_node",
    "fit_variogram",
    "generate",
    "gls_fit",
    "haversine_km",
    "haversine_matrix",
    "heterogeneity_test",
    "inject_missing",
    "intervene",
    "load_panel_csv",
    "log_bayes_factor",
    "mediation_share",
    "misspecification_report",
    "morans_i",
    "node_residuals",
    "pnal_network",
    "pnal_node",
    "predictive_r2",
    "shd",
    "simulate",
    "spatial_test",
    "split_spatial_folds",
    "split_temporal",
    "tabu_learn",
    "temporal_test",
    "validate_constraints",
    "variance_attribution",
    "write_panel_csv",
]
