"""Point estimators of the population average treatment effect.

Five estimators share one dataset type: the naive trial difference in
means, inverse probability of sampling weighting (IPSW), calibration
weighting (CW), augmented calibration weighting (ACW) and its
SCAD-penalized sieve version (``acw_sieve``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .basis import BasisSpec, Degree, build_basis, fitted_spec, target_moments
from .calibration import (
    CalibrationSolution,
    ScadParams,
    cv_select_xi,
    solve_dual,
    solve_penalized_dual,
)
from .data import IntegratedDataset, empirical_pi_a
from .exceptions import ArmEmpty, DataValidationError
from .regression import (
    GlmFit,
    Link,
    OutcomeMode,
    fit_glm,
    fit_outcome_models,
    fit_sampling_score,
    predict,
    with_intercept,
)

Z_975 = 1.959963984540054


class Estimator(str, enum.Enum):
    NAIVE = "naive"
    IPSW = "ipsw"
    CW = "cw"
    ACW = "acw"
    ACW_SIEVE = "acw_sieve"

    @classmethod
    def parse(cls, value: Union[str, "Estimator"]) -> "Estimator":
        if isinstance(value, cls):
            return value
        return cls(str(value).strip().lower().replace("-", "_"))


@dataclass(frozen=True)
class EstimatorConfig:
    """Everything an estimator pipeline needs besides the data.

    ``degree`` of ``None`` means linear, except quadratic for ``acw_sieve``.
    ``xi_grid`` is the calibration grid for ``acw_sieve`` (``None`` picks the
    default grid); ``xi_a`` is the outcome-model level, ``"auto"`` for CV.
    """

    estimator: Estimator
    degree: Optional[Degree] = None
    outcome_mode: OutcomeMode = OutcomeMode.TRIAL_ONLY
    xi_grid: Optional[tuple[float, ...]] = None
    xi_a: Union[str, float, tuple[float, float]] = "auto"
    outcome_xi_grid: Optional[tuple[float, ...]] = None
    cv_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "estimator", Estimator.parse(self.estimator))
        object.__setattr__(self, "outcome_mode", OutcomeMode(self.outcome_mode))
        if self.degree is not None:
            object.__setattr__(self, "degree", Degree(self.degree))
        for name in ("xi_grid", "outcome_xi_grid"):
            grid = getattr(self, name)
            if grid is not None:
                grid = tuple(float(v) for v in grid)
                if not grid:
                    raise DataValidationError(f"{name} must not be empty")
                if any(not v >= 0 for v in grid):
                    raise DataValidationError(f"{name} values must be nonnegative")
                object.__setattr__(self, name, grid)

    @property
    def resolved_degree(self) -> Degree:
        if self.degree is not None:
            return self.degree
        return Degree.QUADRATIC if self.estimator is Estimator.ACW_SIEVE else Degree.LINEAR

    def to_dict(self) -> dict:
        uses_basis = self.estimator is not Estimator.NAIVE
        augmented = self.estimator in (Estimator.ACW, Estimator.ACW_SIEVE)
        sieve = self.estimator is Estimator.ACW_SIEVE
        out = {"estimator": self.estimator.value}
        if uses_basis:
            out["basis_degree"] = self.resolved_degree.value
        if augmented:
            out["outcome_mode"] = self.outcome_mode.value
            out["outcome_intercept"] = True
        if sieve:
            out["xi_grid"] = None if self.xi_grid is None else list(self.xi_grid)
            out["xi_a"] = self.xi_a if isinstance(self.xi_a, str) else np.atleast_1d(
                self.xi_a).astype(float).tolist()
            out["outcome_xi_grid"] = (None if self.outcome_xi_grid is None
                                      else list(self.outcome_xi_grid))
            out["cv_seed"] = self.cv_seed
            out["scad_b"] = 3.7
        return out


@dataclass(frozen=True)
class FittedNuisance:
    """Per-row nuisance values kept for plug-in variance; never serialized."""

    q: np.ndarray
    pi_a: float
    mu0_trial: np.ndarray
    mu1_trial: np.ndarray
    mu0_rwe: np.ndarray
    mu1_rwe: np.ndarray


@dataclass(frozen=True)
class EstimateReport:
    estimator: Estimator
    tau_hat: float
    se: Optional[float] = None
    ci95: Optional[tuple[float, float]] = None
    nuisance: dict = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)
    fitted: Optional[FittedNuisance] = field(default=None, repr=False, compare=False)

    def with_se(self, se: Optional[float], **extra) -> "EstimateReport":
        if se is None:
            return replace(self, se=None, ci95=None)
        lo, hi = self.tau_hat - Z_975 * se, self.tau_hat + Z_975 * se
        echo = {**self.config_echo, **extra} if extra else self.config_echo
        return replace(self, se=float(se), ci95=(lo, hi), config_echo=echo)

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator.value,
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci95": None if self.ci95 is None else list(self.ci95),
            "nuisance": self.nuisance,
            "config": self.config_echo,
        }


def _arm_masks(dataset: IntegratedDataset):
    a = dataset.trial.a
    treated, control = a == 1, a == 0
    if not treated.any():
        raise ArmEmpty(1)
    if not control.any():
        raise ArmEmpty(0)
    return treated, control


def estimate_naive(dataset: IntegratedDataset) -> EstimateReport:
    treated, control = _arm_masks(dataset)
    y = dataset.trial.y
    tau = float(y[treated].mean() - y[control].mean())
    return EstimateReport(Estimator.NAIVE, tau, config_echo={"estimator": "naive"})


def estimate_ipsw(dataset: IntegratedDataset, basis_spec: Optional[BasisSpec] = None,
                  method: str = "pseudo_likelihood") -> EstimateReport:
    """Hajek-normalized IPSW with a logistic sampling score.

    ``pseudo_likelihood`` (default) fits ``P(delta = 1 | X)`` over the
    population represented by the design-weighted RWE rows.  ``stacked``
    regresses the sample label on the stacked trial (weight 1) and RWE
    (weight ``d``) rows; that fit targets ``pi / (1 + pi)`` rather than
    ``pi``, so its inverse weights carry an extra ``+1``.
    """
    treated, control = _arm_masks(dataset)
    spec = basis_spec or fitted_spec(dataset.rwe, Degree.LINEAR)
    names = dataset.schema.names
    G_t = build_basis(dataset.trial.x, spec, names)
    X_t = with_intercept(G_t.values)
    X_r = with_intercept(build_basis(dataset.rwe.x, spec, names).values)
    coef_names = ("(intercept)",) + G_t.names
    if method == "pseudo_likelihood":
        fit = fit_sampling_score(X_t, X_r, dataset.rwe.d, names=coef_names)
    elif method == "stacked":
        delta = np.concatenate([np.ones(dataset.n), np.zeros(dataset.m)])
        weights = np.concatenate([np.ones(dataset.n), dataset.rwe.d])
        fit = fit_glm(np.vstack([X_t, X_r]), delta, "logit", weights, names=coef_names)
    else:
        raise DataValidationError(f"unknown sampling-score method {method!r}")
    pi = expit(X_t @ fit.beta)
    w = 1.0 / pi
    y = dataset.trial.y
    tau = float((w[treated] @ y[treated]) / w[treated].sum()
                - (w[control] @ y[control]) / w[control].sum())
    nuisance = {
        "basis": spec.to_dict(),
        "sampling_score": {**fit.to_dict(), "method": method},
        "sampling_score_range": [float(pi.min()), float(pi.max())],
    }
    echo = {"estimator": "ipsw", "basis_degree": spec.degree.value}
    return EstimateReport(Estimator.IPSW, tau, nuisance=nuisance, config_echo=echo)


def _cw_contrast(dataset: IntegratedDataset, q: np.ndarray, pi_a: float) -> float:
    a, y = dataset.trial.a, dataset.trial.y
    return float(q @ (a * y / pi_a - (1 - a) * y / (1 - pi_a)))


def _calibrate(dataset: IntegratedDataset, spec: BasisSpec) -> CalibrationSolution:
    names = dataset.schema.names
    return solve_dual(build_basis(dataset.trial.x, spec, names),
                      target_moments(dataset.rwe, spec, names))


def estimate_cw(dataset: IntegratedDataset, basis_spec: Optional[BasisSpec] = None,
                calibration: Optional[CalibrationSolution] = None) -> EstimateReport:
    """Calibration-weighted contrast ``sum q_i {A Y / pi_A - (1 - A) Y / (1 - pi_A)}``."""
    _arm_masks(dataset)
    spec = basis_spec or fitted_spec(dataset.rwe, Degree.LINEAR)
    sol = calibration if calibration is not None else _calibrate(dataset, spec)
    pi_a = empirical_pi_a(dataset.trial)
    tau = _cw_contrast(dataset, sol.weights, pi_a)
    nuisance = {"basis": spec.to_dict(), "calibration": sol.to_dict(), "pi_a": pi_a}
    echo = {"estimator": "cw", "basis_degree": spec.degree.value}
    return EstimateReport(Estimator.CW, tau, nuisance=nuisance, config_echo=echo)


def _augmented(dataset: IntegratedDataset, spec: BasisSpec, sol: CalibrationSolution,
               fits: tuple[GlmFit, GlmFit]) -> tuple[float, FittedNuisance]:
    names = dataset.schema.names
    G_t = build_basis(dataset.trial.x, spec, names).values
    G_r = build_basis(dataset.rwe.x, spec, names).values
    mu0_t, mu1_t = predict(fits[0], G_t), predict(fits[1], G_t)
    mu0_r, mu1_r = predict(fits[0], G_r), predict(fits[1], G_r)
    a, y, q = dataset.trial.a, dataset.trial.y, sol.weights
    pi_a = empirical_pi_a(dataset.trial)
    residual = q @ (a * (y - mu1_t) / pi_a - (1 - a) * (y - mu0_t) / (1 - pi_a))
    d = dataset.rwe.d
    projection = d @ (mu1_r - mu0_r) / d.sum()
    fitted = FittedNuisance(q, pi_a, mu0_t, mu1_t, mu0_r, mu1_r)
    return float(residual + projection), fitted


def zero_outcome_fits(K: int, link: Link | str = Link.IDENTITY) -> tuple[GlmFit, GlmFit]:
    """Outcome fits predicting exactly zero (identity link); ACW then equals CW."""
    zero = GlmFit(np.zeros(K + 1), Link(link), True, 0, np.zeros(K + 1, dtype=bool))
    return zero, zero


def estimate_acw(dataset: IntegratedDataset, basis_spec: Optional[BasisSpec] = None,
                 outcome_mode: OutcomeMode | str = OutcomeMode.TRIAL_ONLY,
                 outcome_fits: Optional[tuple[GlmFit, GlmFit]] = None,
                 calibration: Optional[CalibrationSolution] = None) -> EstimateReport:
    """Augmented calibration weighting with unpenalized outcome regressions.

    ``outcome_fits`` and ``calibration`` may be injected; otherwise they
    are fitted here on the same basis.
    """
    _arm_masks(dataset)
    spec = basis_spec or fitted_spec(dataset.rwe, Degree.LINEAR)
    mode = OutcomeMode(outcome_mode)
    sol = calibration if calibration is not None else _calibrate(dataset, spec)
    fits = outcome_fits if outcome_fits is not None else fit_outcome_models(dataset, spec, mode)
    tau, fitted = _augmented(dataset, spec, sol, fits)
    nuisance = {
        "basis": spec.to_dict(),
        "calibration": sol.to_dict(),
        "outcome_models": {"a0": fits[0].to_dict(), "a1": fits[1].to_dict()},
        "pi_a": fitted.pi_a,
    }
    echo = {"estimator": "acw", "basis_degree": spec.degree.value,
            "outcome_mode": mode.value, "outcome_intercept": True}
    return EstimateReport(Estimator.ACW, tau, nuisance=nuisance, config_echo=echo, fitted=fitted)


def estimate_acw_sieve(dataset: IntegratedDataset, basis_spec: Optional[BasisSpec] = None,
                       outcome_mode: OutcomeMode | str = OutcomeMode.TRIAL_ONLY,
                       xi_grid: Optional[Sequence[float]] = None, seed: int = 0,
                       xi_a="auto", outcome_xi_grid: Optional[Sequence[float]] = None,
                       penalize_outcomes: bool = True) -> EstimateReport:
    """ACW on the full quadratic sieve with SCAD-penalized nuisances.

    The calibration level is chosen by 5-fold CV on the balance loss and
    the outcome levels by 5-fold CV on squared prediction error.
    """
    _arm_masks(dataset)
    spec = basis_spec or fitted_spec(dataset.rwe, Degree.QUADRATIC)
    mode = OutcomeMode(outcome_mode)
    names = dataset.schema.names
    G = build_basis(dataset.trial.x, spec, names)
    targets = target_moments(dataset.rwe, spec, names)
    xi, cv_losses = cv_select_xi(G, targets, grid=xi_grid, seed=seed)
    sol = solve_penalized_dual(G, targets, ScadParams(xi))
    fits = fit_outcome_models(dataset, spec, mode, penalized=penalize_outcomes, xi_a=xi_a,
                              seed=seed, grid=outcome_xi_grid)
    tau, fitted = _augmented(dataset, spec, sol, fits)
    nuisance = {
        "basis": spec.to_dict(),
        "calibration": sol.to_dict(),
        "calibration_cv": {"xi": xi, "losses": [float(v) for v in cv_losses]},
        "outcome_models": {"a0": fits[0].to_dict(), "a1": fits[1].to_dict()},
        "pi_a": fitted.pi_a,
    }
    echo = {"estimator": "acw_sieve", "basis_degree": spec.degree.value,
            "outcome_mode": mode.value, "outcome_intercept": True, "cv_seed": seed}
    return EstimateReport(Estimator.ACW_SIEVE, tau, nuisance=nuisance, config_echo=echo,
                          fitted=fitted)


def estimate(dataset: IntegratedDataset, config: EstimatorConfig) -> EstimateReport:
    """Run the pipeline described by ``config`` and echo the full config."""
    est = config.estimator
    spec = None if est is Estimator.NAIVE else fitted_spec(dataset.rwe, config.resolved_degree)
    if est is Estimator.NAIVE:
        report = estimate_naive(dataset)
    elif est is Estimator.IPSW:
        report = estimate_ipsw(dataset, spec)
    elif est is Estimator.CW:
        report = estimate_cw(dataset, spec)
    elif est is Estimator.ACW:
        report = estimate_acw(dataset, spec, config.outcome_mode)
    else:
        report = estimate_acw_sieve(
            dataset, spec, config.outcome_mode, xi_grid=config.xi_grid, seed=config.cv_seed,
            xi_a=config.xi_a, outcome_xi_grid=config.outcome_xi_grid)
    return replace(report, config_echo=config.to_dict())


def estimate_tau(dataset: IntegratedDataset, config: EstimatorConfig) -> float:
    return estimate(dataset, config).tau_hat
