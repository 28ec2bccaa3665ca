"""Bootstrap and plug-in variance estimates, Wald intervals."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from .data import IntegratedDataset, OutcomeType
from .estimators import Z_975, EstimateReport, EstimatorConfig, estimate_tau
from .exceptions import DataValidationError, EmptyKernelNeighborhood, TooManyFailures, TrialBridgeError

log = logging.getLogger(__name__)

KERNEL_FLOOR = 1e-12


@dataclass(frozen=True)
class BootstrapResult:
    replicates: np.ndarray
    se: float
    failures: int
    B: int

    @property
    def variance(self) -> float:
        return self.se ** 2

    def to_dict(self) -> dict:
        return {"B": self.B, "failures": self.failures, "se": self.se,
                "replicates_completed": int(self.replicates.size)}


def _entropy(seed) -> list[int]:
    return [int(s) for s in np.atleast_1d(np.asarray(seed, dtype=np.int64))]


def resample_indices(n: int, m: int, seed, replicate: int) -> tuple[np.ndarray, np.ndarray]:
    """Row indices for one bootstrap replicate, drawn independently per sample."""
    rng = np.random.default_rng(np.random.SeedSequence(_entropy(seed) + [replicate]))
    return rng.integers(0, n, size=n), rng.integers(0, m, size=m)


def _replicate_block(args) -> list[list[float]]:
    dataset, configs, seed, replicates = args
    out = []
    for b in replicates:
        ti, ri = resample_indices(dataset.n, dataset.m, seed, b)
        try:
            boot = dataset.resample(ti, ri)
        except TrialBridgeError:
            out.append([np.nan] * len(configs))
            continue
        row = []
        for cfg in configs:
            try:
                row.append(estimate_tau(boot, cfg))
            except TrialBridgeError as exc:
                log.debug("bootstrap replicate %d failed for %s: %s", b, cfg.estimator.value, exc)
                row.append(np.nan)
        out.append(row)
    return out


def bootstrap_replicates(dataset: IntegratedDataset, configs: Sequence[EstimatorConfig], B: int,
                         seed, threads: int = 1) -> np.ndarray:
    """``(B, len(configs))`` matrix of replicate estimates; failures are NaN.

    All configurations see the same resamples. Replicate ``b`` draws from
    its own seed ``(seed, b)``, so the matrix does not depend on ``threads``.
    """
    if B < 2:
        raise DataValidationError(f"bootstrap needs B >= 2, got {B}")
    configs = list(configs)
    if threads <= 1:
        rows = _replicate_block((dataset, configs, seed, range(B)))
    else:
        blocks = [list(c) for c in np.array_split(np.arange(B), min(threads, B) * 4) if c.size]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = pool.map(_replicate_block, [(dataset, configs, seed, blk) for blk in blocks])
            rows = [r for part in parts for r in part]
    return np.asarray(rows, dtype=float).reshape(B, len(configs))


def summarize_replicates(values: np.ndarray) -> BootstrapResult:
    """Drop failed replicates and take the sample SD of the rest."""
    values = np.asarray(values, dtype=float)
    B = values.size
    ok = values[np.isfinite(values)]
    failures = B - ok.size
    if failures > B / 2 or ok.size < 2:
        raise TooManyFailures(failures, B)
    ok.setflags(write=False)
    return BootstrapResult(ok, float(np.std(ok, ddof=1)), failures, B)


def bootstrap_variance(dataset: IntegratedDataset,
                       config: Union[EstimatorConfig, Sequence[EstimatorConfig]], B: int,
                       seed, threads: int = 1):
    """Bootstrap SE for one configuration, or a list of results for several.

    Each replicate resamples ``n`` trial rows and ``m`` RWE rows with
    replacement (design weights travel with their rows) and reruns the
    whole pipeline, nuisance fits and cross-validation included.

    Raises
    ------
    TooManyFailures
        More than ``B/2`` replicates failed, or fewer than two succeeded.
    """
    single = isinstance(config, EstimatorConfig)
    configs = [config] if single else list(config)
    mat = bootstrap_replicates(dataset, configs, B, seed, threads)
    results = [summarize_replicates(mat[:, j]) for j in range(len(configs))]
    return results[0] if single else results


def silverman_bandwidth(x: np.ndarray) -> np.ndarray:
    """Per-column normal-reference bandwidth ``sd_k (4 / ((p + 2) n))^(1/(p+4))``."""
    n, p = x.shape
    sd = x.std(axis=0, ddof=1) if n > 1 else np.ones(p)
    sd = np.where(sd > 0, sd, 1.0)
    return sd * (4.0 / ((p + 2) * n)) ** (1.0 / (p + 4))


def kernel_conditional_variance(x_eval: np.ndarray, x_arm: np.ndarray, sq_resid: np.ndarray,
                                bandwidth=None, arm: int = 0) -> np.ndarray:
    """Nadaraya-Watson smooth of squared residuals with a product Gaussian kernel.

    Kernel weights peak at 1 per point; an evaluation point whose weights
    all fall below 1e-12 raises :class:`EmptyKernelNeighborhood`.
    """
    h = silverman_bandwidth(x_arm) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, dtype=float), (x_arm.shape[1],))
    u = (x_eval[:, None, :] - x_arm[None, :, :]) / h
    K = np.exp(-0.5 * np.einsum("ijk,ijk->ij", u, u))
    total = K.sum(axis=1)
    empty = np.flatnonzero(total < KERNEL_FLOOR)
    if empty.size:
        raise EmptyKernelNeighborhood(int(empty[0]), arm)
    return (K @ sq_resid) / total


def plugin_variance_acw(dataset: IntegratedDataset, report: EstimateReport,
                        bandwidth: Optional[Union[float, Sequence[float]]] = None) -> float:
    """Plug-in variance of the ACW estimate.

    Uses ``pi_delta(X_i) = 1 / (N q_i)`` with ``N = sum d``, so the trial term
    becomes ``N sum q_i^2 {V_1(X_i)/pi_A + V_0(X_i)/(1 - pi_A)}``. Conditional
    variances come from a kernel smooth within each trial arm (continuous
    outcomes) or ``mu (1 - mu)`` (binary). The total is divided by ``N``.
    """
    f = report.fitted
    if f is None:
        raise DataValidationError(f"{report.estimator.value} report carries no outcome fits")
    tr, d = dataset.trial, dataset.rwe.d
    N = float(d.sum())
    if dataset.outcome_type is OutcomeType.BINARY:
        v1 = f.mu1_trial * (1 - f.mu1_trial)
        v0 = f.mu0_trial * (1 - f.mu0_trial)
    else:
        arms = []
        for arm, mu in ((0, f.mu0_trial), (1, f.mu1_trial)):
            rows = tr.a == arm
            arms.append(kernel_conditional_variance(
                tr.x, tr.x[rows], (tr.y[rows] - mu[rows]) ** 2, bandwidth, arm))
        v0, v1 = arms
    trial_term = N * float(f.q ** 2 @ (v1 / f.pi_a + v0 / (1 - f.pi_a)))
    cate = f.mu1_rwe - f.mu0_rwe
    rwe_term = float(d ** 2 @ (cate - report.tau_hat) ** 2) / N
    return (trial_term + rwe_term) / N


def wald_ci(tau_hat: float, se: float, level: float = 0.95) -> tuple[float, float]:
    if se < 0:
        raise DataValidationError(f"standard error must be nonnegative, got {se}")
    z = Z_975 if level == 0.95 else float(norm.ppf(0.5 + level / 2))
    return tau_hat - z * se, tau_hat + z * se
