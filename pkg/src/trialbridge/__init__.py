"""Average treatment effects from a randomized trial generalized to a target
population described by a design-weighted real-world sample."""

from .basis import BasisSpec, Degree, build_basis, fit_standardization, target_moments
from .calibration import (
    CalibrationSolution,
    ScadParams,
    cv_select_xi,
    dual_objective,
    scad_derivative,
    solve_dual,
    solve_penalized_dual,
)
from .data import (
    CovariateSchema,
    IntegratedDataset,
    OutcomeType,
    RweSample,
    TrialSample,
    empirical_pi_a,
    load_csv_pair,
    write_csv_pair,
)
from .estimators import (
    EstimateReport,
    Estimator,
    EstimatorConfig,
    estimate,
    estimate_acw,
    estimate_acw_sieve,
    estimate_cw,
    estimate_ipsw,
    estimate_naive,
)
from .exceptions import DataValidationError, SolverError, TrialBridgeError
from .regression import GlmFit, fit_glm, fit_outcome_models, fit_scad_glm, predict
from .simulation import ScenarioConfig, run_monte_carlo
from .variance import bootstrap_variance, plugin_variance_acw, wald_ci

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "Degree", "build_basis", "fit_standardization", "target_moments",
    "CalibrationSolution", "ScadParams", "cv_select_xi", "dual_objective", "scad_derivative",
    "solve_dual", "solve_penalized_dual",
    "CovariateSchema", "IntegratedDataset", "OutcomeType", "RweSample", "TrialSample",
    "empirical_pi_a", "load_csv_pair", "write_csv_pair",
    "EstimateReport", "Estimator", "EstimatorConfig", "estimate", "estimate_acw",
    "estimate_acw_sieve", "estimate_cw", "estimate_ipsw", "estimate_naive",
    "DataValidationError", "SolverError", "TrialBridgeError",
    "GlmFit", "fit_glm", "fit_outcome_models", "fit_scad_glm", "predict",
    "ScenarioConfig", "run_monte_carlo",
    "bootstrap_variance", "plugin_variance_acw", "wald_ci",
]
