"""Monte Carlo harness for the two-sample simulation study.

Each replicate draws a fresh finite population, a trial sample from its
first half and a simple random RWE sample from its second half, then runs
every requested estimator with a bootstrap standard error. Replicate ``r``
takes its randomness from ``SeedSequence([seed, r, stream])``, so results
do not depend on scheduling or on the number of worker processes.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .data import CovariateSchema, IntegratedDataset, OutcomeType, RweSample, TrialSample
from .estimators import Z_975, Estimator, EstimatorConfig, estimate_tau
from .exceptions import (
    ArmEmpty,
    DataValidationError,
    ReplicateDataError,
    ReplicateSolverError,
    TooManyFailures,
    TrialBridgeError,
)
from .regression import OutcomeMode
from .variance import bootstrap_replicates, summarize_replicates

log = logging.getLogger(__name__)

SELECTION_SLOPES = np.array([-0.5, -0.3, -0.5, -0.4])
RWE_TREATMENT_SLOPES = np.array([-1.0, 0.5, -0.25, -0.1])
CONTINUOUS_SLOPES = np.array([13.7, 13.7, 13.7, 13.7])
TREATED_SLOPE = 27.4
BINARY_SLOPES = np.array([0.0, -1.0, -1.0, 1.0])
MAX_ARM_REDRAWS = 10

STREAM_POPULATION, STREAM_SAMPLES, STREAM_BOOTSTRAP, STREAM_CV = range(4)
COVARIATES = ("x1", "x2", "x3", "x4")


class Scenario(str, enum.Enum):
    S1_OC_SC = "S1_OC_SC"
    S2_OC_SW = "S2_OC_SW"
    S3_OW_SC = "S3_OW_SC"
    S4_OW_SW = "S4_OW_SW"

    @classmethod
    def parse(cls, value) -> "Scenario":
        if isinstance(value, cls):
            return value
        text = str(value).strip().upper()
        for s in cls:
            if text in (s.value, s.value[:2], s.value[1]):
                return s
        raise DataValidationError(f"unknown scenario {value!r}")

    @property
    def number(self) -> int:
        return int(self.value[1])

    @property
    def outcome_misspecified(self) -> bool:
        return self in (Scenario.S3_OW_SC, Scenario.S4_OW_SW)

    @property
    def selection_misspecified(self) -> bool:
        return self in (Scenario.S2_OC_SW, Scenario.S4_OW_SW)

    @property
    def label(self) -> str:
        o = "W" if self.outcome_misspecified else "C"
        s = "W" if self.selection_misspecified else "C"
        return f"{self.number}. O:{o}/S:{s}"


def expected_selection_rate(intercept: float) -> float:
    """Mean selection probability when the linear predictor uses N(1, 1) covariates."""
    mean = intercept + SELECTION_SLOPES.sum()
    sd = float(np.sqrt(SELECTION_SLOPES @ SELECTION_SLOPES))
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    return float(weights @ expit(mean + sd * nodes) / weights.sum())


def intercept_for_rate(rate: float) -> float:
    return float(brentq(lambda c: expected_selection_rate(c) - rate, -20.0, 5.0, xtol=1e-12))


LARGE_N_HALF = 250_000
LARGE_N_RWE = 10_000
LARGE_N_TRIAL = 2250


@dataclass(frozen=True)
class ScenarioConfig:
    outcome_type: OutcomeType = OutcomeType.CONTINUOUS
    scenario: Scenario = Scenario.S1_OC_SC
    pop_size_half: int = 50_000
    rwe_size: int = 5000
    rct_logit_intercept: float = -2.5
    reps: int = 1000
    B: int = 50
    seed: int = 0
    preset: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "outcome_type", OutcomeType(self.outcome_type))
        object.__setattr__(self, "scenario", Scenario.parse(self.scenario))
        if self.reps < 1:
            raise DataValidationError(f"reps must be positive, got {self.reps}")
        if self.B != 0 and self.B < 2:
            raise DataValidationError(f"B must be 0 (no bootstrap) or at least 2, got {self.B}")
        if not 0 < self.rwe_size <= self.pop_size_half:
            raise DataValidationError("rwe_size must lie in (0, pop_size_half]")

    @classmethod
    def large_n(cls, **overrides) -> "ScenarioConfig":
        """Bigger population and samples: ``N = 500000``, ``m = 10000``, ``n`` near 2250."""
        base = dict(pop_size_half=LARGE_N_HALF, rwe_size=LARGE_N_RWE,
                    rct_logit_intercept=intercept_for_rate(LARGE_N_TRIAL / LARGE_N_HALF),
                    preset="large_n")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["outcome_type"] = self.outcome_type.value
        out["scenario"] = self.scenario.value
        return out


@dataclass(frozen=True)
class Population:
    x: np.ndarray
    x_star: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    p0: Optional[np.ndarray] = None
    p1: Optional[np.ndarray] = None

    @property
    def tau(self) -> float:
        """Finite-population average of ``Y(1) - Y(0)``."""
        return float(np.mean(self.y1 - self.y0))


def kang_schafer(x: np.ndarray) -> np.ndarray:
    """Nonlinear transform of the covariates, rescaled to mean 1 and variance 1."""
    x1, x2, x3, x4 = x.T
    raw = np.column_stack([
        np.exp(x1 / 3),
        x2 / (1 + np.exp(x1)) + 10,
        x1 * x3 / 25 + 0.6,
        x1 + x4 + 20,
    ])
    return (raw - raw.mean(axis=0)) / raw.std(axis=0) + 1.0


def generate_population(config: ScenarioConfig, rng: np.random.Generator) -> Population:
    N = 2 * config.pop_size_half
    x = rng.normal(1.0, 1.0, size=(N, 4))
    x_star = kang_schafer(x)
    z = x_star if config.scenario.outcome_misspecified else x
    if config.outcome_type is OutcomeType.CONTINUOUS:
        base = -100.0 + z[:, 1:] @ CONTINUOUS_SLOPES[1:]
        eps = rng.normal(size=(N, 2))
        y0 = base + eps[:, 0]
        y1 = base + TREATED_SLOPE * z[:, 0] + eps[:, 1]
        return Population(x, x_star, y0, y1)
    eta0 = 1.0 + z @ BINARY_SLOPES
    p0 = expit(eta0)
    p1 = expit(eta0 - 2.0 * z[:, 0])
    u = rng.random(size=(N, 2))
    return Population(x, x_star, (u[:, 0] < p0).astype(float), (u[:, 1] < p1).astype(float),
                      p0, p1)


@dataclass(frozen=True)
class SampleTruth:
    tau: float
    trial_rows: np.ndarray
    rwe_rows: np.ndarray


def draw_samples(pop: Population, config: ScenarioConfig,
                 rng: np.random.Generator) -> tuple[IntegratedDataset, SampleTruth]:
    """Trial by Bernoulli selection from the first half, RWE by SRS from the second.

    Selection and treatment are redrawn (at most ten times) if an arm of
    the trial comes out empty.
    """
    H = config.pop_size_half
    zs = pop.x_star if config.scenario.selection_misspecified else pop.x
    pi = expit(config.rct_logit_intercept + zs[:H] @ SELECTION_SLOPES)
    for attempt in range(MAX_ARM_REDRAWS):
        rows = np.flatnonzero(rng.random(H) < pi)
        a = (rng.random(rows.size) < 0.5).astype(float)
        if 0 < a.sum() < rows.size:
            break
    else:
        raise ArmEmpty(0 if a.all() else 1)
    y = np.where(a == 1, pop.y1[rows], pop.y0[rows])
    trial = TrialSample(pop.x[rows], a, y)

    rwe_rows = H + np.sort(rng.choice(H, size=config.rwe_size, replace=False))
    xr = pop.x[rwe_rows]
    ar = (rng.random(rwe_rows.size) < expit(xr @ RWE_TREATMENT_SLOPES)).astype(float)
    yr = np.where(ar == 1, pop.y1[rwe_rows], pop.y0[rwe_rows])
    d = np.full(rwe_rows.size, H / config.rwe_size)
    rwe = RweSample(xr, d, ar, yr)
    dataset = IntegratedDataset(CovariateSchema(COVARIATES), trial, rwe, config.outcome_type)
    return dataset, SampleTruth(pop.tau, rows, rwe_rows)


def replicate_rng(seed: int, rep: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rep, stream]))


def default_estimators(outcome_mode: OutcomeMode | str = OutcomeMode.POOLED_RWE
                       ) -> list[EstimatorConfig]:
    """The five estimators of the study; augmented ones pool RWE outcomes."""
    return [EstimatorConfig(e, outcome_mode=outcome_mode) for e in Estimator]


@dataclass(frozen=True)
class ReplicateResult:
    rep: int
    tau_true: float
    n: int
    tau_hat: tuple[float, ...]
    se: tuple[float, ...]
    boot_failures: tuple[int, ...]


def _cv_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, rep, STREAM_CV]).generate_state(1)[0])


def run_replicate(config: ScenarioConfig, estimators: Sequence[EstimatorConfig],
                  rep: int) -> ReplicateResult:
    pop = generate_population(config, replicate_rng(config.seed, rep, STREAM_POPULATION))
    dataset, truth = draw_samples(pop, config, replicate_rng(config.seed, rep, STREAM_SAMPLES))
    cv_seed = _cv_seed(config.seed, rep)
    cfgs = [replace(e, cv_seed=cv_seed) for e in estimators]
    taus = tuple(estimate_tau(dataset, c) for c in cfgs)
    if config.B == 0:
        return ReplicateResult(rep, truth.tau, dataset.n, taus, (np.nan,) * len(cfgs),
                               (0,) * len(cfgs))
    mat = bootstrap_replicates(dataset, cfgs, config.B, [config.seed, rep, STREAM_BOOTSTRAP])
    ses, fails = [], []
    for j in range(len(cfgs)):
        try:
            res = summarize_replicates(mat[:, j])
            ses.append(res.se)
            fails.append(res.failures)
        except TooManyFailures as exc:
            log.warning("replicate %d: bootstrap for %s failed (%s)", rep, cfgs[j].estimator.value, exc)
            ses.append(np.nan)
            fails.append(exc.failures)
    return ReplicateResult(rep, truth.tau, dataset.n, taus, tuple(ses), tuple(fails))


def _run_block(args):
    config, estimators, reps = args
    out = []
    for rep in reps:
        try:
            out.append(run_replicate(config, estimators, rep))
        except DataValidationError as exc:
            return out, ("data", rep, f"{type(exc).__name__}: {exc}")
        except TrialBridgeError as exc:
            return out, ("solver", rep, f"{type(exc).__name__}: {exc}")
    return out, None


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    bias: float
    mc_variance: float
    mc_se_bias: float
    mean_boot_variance: float
    rel_bias_boot_var_pct: float
    coverage_pct: float
    reps_with_se: int


@dataclass
class MonteCarloSummary:
    config: ScenarioConfig
    estimators: list[EstimatorSummary]
    tau_true: float
    reps_completed: int
    mean_trial_size: float
    replicates: list[ReplicateResult] = field(default_factory=list, repr=False)

    def by_name(self) -> dict[str, EstimatorSummary]:
        return {e.estimator: e for e in self.estimators}

    def rows(self) -> list[dict]:
        out = []
        for e in self.estimators:
            out.append({
                "outcome_type": self.config.outcome_type.value,
                "scenario": self.config.scenario.value,
                "estimator": e.estimator,
                "bias": e.bias,
                "mc_var": e.mc_variance,
                "mc_se_bias": e.mc_se_bias,
                "rel_bias_boot_pct": e.rel_bias_boot_var_pct,
                "coverage_pct": e.coverage_pct,
                "reps_completed": self.reps_completed,
                "seed": self.config.seed,
            })
        return out

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "tau_true": self.tau_true,
            "reps_completed": self.reps_completed,
            "mean_trial_size": self.mean_trial_size,
            "estimators": [asdict(e) for e in self.estimators],
        }


def summarize(config: ScenarioConfig, names: Sequence[str],
              results: Sequence[ReplicateResult]) -> MonteCarloSummary:
    """Aggregate replicate results in replicate order.

    Bias and Monte Carlo variance use each replicate's own finite-population
    truth: ``err_r = tau_hat_r - tau_r``. Coverage counts replicates whose
    Wald interval contains ``tau_r``, among those with a bootstrap SE.
    """
    tau_true = np.array([r.tau_true for r in results])
    est = np.array([r.tau_hat for r in results]).reshape(len(results), len(names))
    ses = np.array([r.se for r in results], dtype=float).reshape(len(results), len(names))
    R = len(results)
    summaries = []
    for j, name in enumerate(names):
        err = est[:, j] - tau_true
        mc_var = float(np.var(err, ddof=1)) if R > 1 else np.nan
        se = ses[:, j]
        ok = np.isfinite(se)
        if ok.any():
            boot_var = float(np.mean(se[ok] ** 2))
            rel = 100.0 * (boot_var - mc_var) / mc_var if mc_var > 0 else np.nan
            cover = float(100.0 * np.mean(np.abs(err[ok]) <= Z_975 * se[ok]))
        else:
            boot_var = rel = cover = np.nan
        summaries.append(EstimatorSummary(
            name, float(err.mean()), mc_var, float(np.sqrt(mc_var / R)) if R > 1 else np.nan,
            boot_var, rel, cover, int(ok.sum())))
    return MonteCarloSummary(config, summaries, float(tau_true.mean()), R,
                             float(np.mean([r.n for r in results])), list(results))


def run_monte_carlo(config: ScenarioConfig,
                    estimators: Optional[Sequence[EstimatorConfig | str]] = None,
                    threads: int = 1) -> MonteCarloSummary:
    """Run ``config.reps`` replicates, in parallel when ``threads > 1``.

    Estimator failures stop the run with an error naming the replicate;
    a replicate whose bootstrap mostly fails keeps its point estimates and
    is left out of the coverage and bootstrap-variance columns.
    """
    cfgs = [e if isinstance(e, EstimatorConfig)
            else EstimatorConfig(e, outcome_mode=OutcomeMode.POOLED_RWE)
            for e in (estimators if estimators is not None else default_estimators())]
    if config.reps < 2:
        raise DataValidationError(f"Monte Carlo needs reps >= 2, got {config.reps}")
    reps = np.arange(config.reps)
    if threads <= 1:
        blocks = [_run_block((config, cfgs, reps))]
    else:
        chunks = [c for c in np.array_split(reps, min(config.reps, threads * 8)) if c.size]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(_run_block, [(config, cfgs, c) for c in chunks]))
    results: list[ReplicateResult] = []
    for part, error in blocks:
        results.extend(part)
        if error is not None:
            kind, rep, message = error
            raise (ReplicateDataError if kind == "data" else ReplicateSolverError)(rep, message)
    results.sort(key=lambda r: r.rep)
    names = [c.estimator.value for c in cfgs]
    return summarize(config, names, results)


CSV_COLUMNS = ("outcome_type", "scenario", "estimator", "bias", "mc_var", "mc_se_bias",
               "rel_bias_boot_pct", "coverage_pct", "reps_completed", "seed")


def _num(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else format(v, ".17g")
    return str(v)


def write_summary_csv(summaries: Iterable[MonteCarloSummary], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for s in summaries:
        for row in s.rows():
            writer.writerow([_num(row[c]) for c in CSV_COLUMNS])


def json_safe(obj):
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    return obj


def summaries_to_json(summaries: Iterable[MonteCarloSummary], seed: int) -> str:
    payload = {"seed": seed, "summaries": [s.to_dict() for s in summaries]}
    return json.dumps(json_safe(payload), indent=2, sort_keys=True)


def write_replicates_csv(summaries: Sequence[MonteCarloSummary], fh) -> None:
    """One row per replicate: truth, trial size, and each estimator's estimate and SE."""
    names = [e.estimator for e in summaries[0].estimators]
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["outcome_type", "scenario", "seed", "rep", "tau_true", "n"]
                    + [f"{n}_tau_hat" for n in names] + [f"{n}_se" for n in names])
    for s in summaries:
        cfg = s.config
        for r in s.replicates:
            writer.writerow([cfg.outcome_type.value, cfg.scenario.value, cfg.seed, r.rep,
                             _num(r.tau_true), r.n]
                            + [_num(float(v)) for v in r.tau_hat]
                            + [_num(float(v)) for v in r.se])
