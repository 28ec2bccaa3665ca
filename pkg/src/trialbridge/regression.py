"""Nuisance regressions: least squares and logistic fits, plain or SCAD-penalized.

Designs passed to the fitting functions carry an intercept in column 0.
:func:`predict` takes basis rows *without* that column and adds the
intercept itself.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import linalg
from scipy.special import expit

from .basis import BasisSpec, build_basis
from .calibration import ScadParams, fold_indices, scad_derivative
from .data import IntegratedDataset, OutcomeType
from .exceptions import (
    AllFoldsFailed,
    ArmTooSmall,
    DimensionMismatch,
    EmptyGrid,
    MissingColumn,
    RankDeficientDesign,
    Separation,
    SolverError,
)

IRLS_MAX_ITER = 50
IRLS_TOL = 1e-10
CD_TOL = 1e-8
CD_MAX_SWEEPS = 10_000
SEPARATION_NORM = 1e4


class Link(str, enum.Enum):
    IDENTITY = "identity"
    LOGIT = "logit"


class OutcomeMode(str, enum.Enum):
    TRIAL_ONLY = "trial_only"
    POOLED_RWE = "pooled_rwe"


@dataclass(frozen=True)
class GlmFit:
    beta: np.ndarray
    link: Link
    converged: bool
    iterations: int
    selected: np.ndarray
    xi: float = 0.0
    names: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        names = self.names or ("(intercept)",) + tuple(
            f"g{k}" for k in range(1, len(self.beta)))
        return {
            "link": self.link.value,
            "coefficients": {n: float(b) for n, b in zip(names, self.beta)},
            "selected": [n for n, s in zip(names, self.selected) if s],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "xi": float(self.xi),
        }


def _fit(beta, link, converged, iterations, xi=0.0, names=()) -> GlmFit:
    beta = np.asarray(beta, dtype=float).copy()
    beta.setflags(write=False)
    return GlmFit(beta, Link(link), converged, iterations, beta != 0, xi, tuple(names))


def _prepare(design, y, weights):
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionMismatch(f"design {X.shape} and response {y.shape} disagree")
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != y.shape:
        raise DimensionMismatch("weights length differs from response")
    if X.shape[0] < X.shape[1]:
        raise RankDeficientDesign(f"{X.shape[0]} rows for {X.shape[1]} columns")
    return X, y, w


def _check_full_rank(Xw: np.ndarray) -> None:
    r = np.abs(np.diag(np.linalg.qr(Xw, mode="r")))
    if r.size and r.min() <= 1e-10 * max(r.max(), 1e-300):
        raise RankDeficientDesign(
            f"design columns {np.flatnonzero(r <= 1e-10 * r.max()).tolist()} are collinear"
        )


def fit_glm(design, y, link: Link | str = Link.IDENTITY, weights=None,
            names: Sequence[str] = ()) -> GlmFit:
    """Weighted least squares (identity) or logistic maximum likelihood (logit).

    Least squares goes through a QR factorization. The logistic fit runs
    IRLS until ``max |delta beta| < 1e-10`` or 50 iterations.

    Raises
    ------
    RankDeficientDesign
        Collinear columns or fewer rows than columns.
    Separation
        Constant response or ``||beta|| > 1e4`` during IRLS.
    """
    link = Link(link)
    X, y, w = _prepare(design, y, weights)
    sw = np.sqrt(w)
    if link is Link.IDENTITY:
        Q, R = np.linalg.qr(X * sw[:, None])
        d = np.abs(np.diag(R))
        if d.min() <= 1e-10 * max(d.max(), 1e-300):
            raise RankDeficientDesign(
                f"design columns {np.flatnonzero(d <= 1e-10 * d.max()).tolist()} are collinear"
            )
        beta = linalg.solve_triangular(R, Q.T @ (sw * y), check_finite=False)
        return _fit(beta, link, True, 1, names=names)

    pos = w > 0
    if np.all(y[pos] == y[pos][0]):
        raise Separation("logistic response is constant; the MLE is at infinity")
    _check_full_rank(X * sw[:, None])
    beta = np.zeros(X.shape[1])
    converged = False
    it = 0
    for it in range(1, IRLS_MAX_ITER + 1):
        p = expit(X @ beta)
        v = w * p * (1 - p)
        H = (X * v[:, None]).T @ X
        score = X.T @ (w * (y - p))
        try:
            delta = linalg.cho_solve(linalg.cho_factor(H, check_finite=False), score,
                                     check_finite=False)
        except linalg.LinAlgError:
            raise Separation("IRLS information matrix became singular") from None
        beta = beta + delta
        if np.linalg.norm(beta) > SEPARATION_NORM:
            raise Separation(f"||beta|| exceeded {SEPARATION_NORM:g} during IRLS")
        if np.abs(delta).max() < IRLS_TOL:
            converged = True
            break
    if not converged and np.abs(y - expit(X @ beta))[pos].max() < 1e-6:
        # separated data: beta grows without bound but too slowly to hit the norm cap
        raise Separation("IRLS is diverging toward a perfect fit")
    return _fit(beta, link, converged, it, names=names)


def fit_sampling_score(trial_design, rwe_design, d, names: Sequence[str] = ()) -> GlmFit:
    """Logistic model for trial participation fitted over the target population.

    Maximizes the pseudo log-likelihood
    ``sum_trial eta_i - sum_rwe d_j log(1 + exp(eta_j))``, i.e. solves
    ``sum_trial x_i = sum_rwe d_j expit(eta_j) x_j``, where the design-weighted
    RWE rows stand in for the whole population. Newton with step halving.
    """
    Xt = np.asarray(trial_design, dtype=float)
    Xr = np.asarray(rwe_design, dtype=float)
    d = np.asarray(d, dtype=float)
    if Xt.shape[1] != Xr.shape[1] or d.shape != (Xr.shape[0],):
        raise DimensionMismatch("trial and RWE designs disagree")
    _check_full_rank(Xr * np.sqrt(d)[:, None])
    target = Xt.sum(axis=0)

    def loglik(beta):
        return float(target @ beta - d @ np.logaddexp(0.0, Xr @ beta))

    beta = np.zeros(Xt.shape[1])
    beta[0] = np.log(Xt.shape[0] / d.sum())
    ll = loglik(beta)
    converged = False
    it = 0
    for it in range(1, IRLS_MAX_ITER + 1):
        p = expit(Xr @ beta)
        score = target - (d * p) @ Xr
        info = (Xr * (d * p * (1 - p))[:, None]).T @ Xr
        try:
            delta = linalg.cho_solve(linalg.cho_factor(info, check_finite=False), score,
                                     check_finite=False)
        except linalg.LinAlgError:
            raise Separation("sampling-score information matrix became singular") from None
        t = 1.0
        while True:
            cand = beta + t * delta
            cand_ll = loglik(cand)
            if cand_ll >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, cand_ll
        if np.linalg.norm(beta) > SEPARATION_NORM:
            raise Separation(f"||beta|| exceeded {SEPARATION_NORM:g} in the sampling-score fit")
        if np.abs(t * delta).max() < IRLS_TOL:
            converged = True
            break
    return _fit(beta, Link.LOGIT, converged, it, names=names)


@njit(cache=True)
def _lasso_cd(Q, c, pen, beta, tol, max_sweeps):
    """Coordinate descent for ``0.5 b'Qb - c'b + sum pen_k |b_k|``."""
    K = c.shape[0]
    for sweep in range(max_sweeps):
        biggest = 0.0
        for k in range(K):
            old = beta[k]
            z = c[k] + Q[k, k] * old
            for j in range(K):
                z -= Q[k, j] * beta[j]
            if z > pen[k]:
                new = (z - pen[k]) / Q[k, k]
            elif z < -pen[k]:
                new = (z + pen[k]) / Q[k, k]
            else:
                new = 0.0
            if new != old:
                beta[k] = new
                change = abs(new - old)
                if change > biggest:
                    biggest = change
        if biggest < tol:
            return sweep + 1
    return max_sweeps


def _logit_loss(X, y, w, beta) -> float:
    eta = X @ beta
    return float(-(w @ (y * eta - np.logaddexp(0.0, eta))) / w.sum())


def penalized_objective(beta, design, y, link, pen, weights=None) -> float:
    """Normalized loss plus ``sum pen_k |beta_k|`` minimized by the SCAD fit."""
    X, y, w = _prepare(design, y, weights)
    beta = np.asarray(beta, dtype=float)
    if Link(link) is Link.IDENTITY:
        loss = 0.5 * float(w @ (y - X @ beta) ** 2) / w.sum()
    else:
        loss = _logit_loss(X, y, w, beta)
    return loss + float(np.sum(np.asarray(pen) * np.abs(beta)))


def _weighted_lasso(X, y, w, link, pen, beta0) -> tuple[np.ndarray, int, bool]:
    W = w.sum()
    beta = beta0.astype(float).copy()
    if link is Link.IDENTITY:
        Q = (X * (w / W)[:, None]).T @ X
        c = X.T @ (w * y) / W
        sweeps = _lasso_cd(Q, c, pen, beta, CD_TOL, CD_MAX_SWEEPS)
        return beta, sweeps, sweeps < CD_MAX_SWEEPS
    # Proximal Newton: quadratic model of the log-likelihood, CD on the model.
    obj = _logit_loss(X, y, w, beta) + pen @ np.abs(beta)
    for it in range(1, IRLS_MAX_ITER + 1):
        p = expit(X @ beta)
        v = w * p * (1 - p) / W
        Q = (X * v[:, None]).T @ X
        grad = -X.T @ (w * (y - p)) / W
        trial = beta.copy()
        _lasso_cd(Q, Q @ beta - grad, pen, trial, CD_TOL * 1e-2, CD_MAX_SWEEPS)
        step = trial - beta
        t = 1.0
        while True:
            cand = beta + t * step
            cand_obj = _logit_loss(X, y, w, cand) + pen @ np.abs(cand)
            if cand_obj <= obj + 1e-12 * abs(obj) or t < 1e-10:
                break
            t *= 0.5
        beta, obj = cand, cand_obj
        if np.linalg.norm(beta) > SEPARATION_NORM:
            raise Separation(f"||beta|| exceeded {SEPARATION_NORM:g} in penalized IRLS")
        if np.abs(t * step).max() < CD_TOL:
            return beta, it, True
    return beta, IRLS_MAX_ITER, False


def scad_weights(beta_init: np.ndarray, params: ScadParams) -> np.ndarray:
    pen = np.asarray(scad_derivative(np.abs(beta_init), params), dtype=float)
    pen[0] = 0.0
    return pen


def fit_scad_glm(design, y, link: Link | str, params: ScadParams, weights=None,
                 init: Optional[GlmFit] = None, names: Sequence[str] = ()) -> GlmFit:
    """One-step local linear approximation to the SCAD-penalized fit.

    The unpenalized fit ``init`` sets per-coefficient lasso weights
    ``q_xi(|beta_init_k|)``; the resulting weighted-lasso problem is solved by
    coordinate descent. The intercept (column 0) is never penalized.
    """
    link = Link(link)
    X, y, w = _prepare(design, y, weights)
    if init is None:
        init = fit_glm(X, y, link, w, names)
    pen = scad_weights(init.beta, params)
    if not pen.any():
        return _fit(init.beta, link, init.converged, init.iterations, params.xi, names)
    beta, iters, ok = _weighted_lasso(X, y, w, link, pen, np.asarray(init.beta))
    return _fit(beta, link, ok, iters, params.xi, names)


def predict(fit: GlmFit, rows) -> np.ndarray:
    """Mean prediction for basis rows (no intercept column)."""
    G = np.asarray(rows, dtype=float)
    if G.ndim == 1:
        G = G[None, :]
    if G.shape[1] + 1 != fit.beta.shape[0]:
        raise DimensionMismatch(
            f"rows have {G.shape[1]} columns; fit expects {fit.beta.shape[0] - 1}"
        )
    eta = fit.beta[0] + G @ fit.beta[1:]
    return eta if fit.link is Link.IDENTITY else expit(eta)


def with_intercept(G: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((G.shape[0], 1)), G])


def default_outcome_grid(design, y, link: Link, points: int = 20) -> np.ndarray:
    """Log-spaced ``xi`` over ``[1e-4, 1]`` times the largest null-model score."""
    X = np.asarray(design, dtype=float)
    resid = y - y.mean()
    top = float(np.abs(X[:, 1:].T @ resid).max(initial=0.0)) / X.shape[0]
    if top == 0:
        return np.array([0.0])
    return np.geomspace(1e-4 * top, top, points)


def cv_select_outcome_xi(design, y, link: Link | str, grid=None, folds: int = 5, seed=0,
                         b: float = 3.7) -> tuple[float, np.ndarray]:
    """Choose the outcome-model SCAD level by CV on held-out squared error."""
    link = Link(link)
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = default_outcome_grid(X, y, link) if grid is None else np.asarray(grid, float).ravel()
    if grid.size == 0:
        raise EmptyGrid("outcome xi grid is empty")
    n = X.shape[0]
    totals = np.zeros(grid.size)
    counts = np.zeros(grid.size, dtype=int)
    for val_idx in fold_indices(n, folds, seed):
        train = np.ones(n, dtype=bool)
        train[val_idx] = False
        try:
            init = fit_glm(X[train], y[train], link)
        except SolverError:
            continue
        for j, xi in enumerate(grid):
            try:
                fit = fit_scad_glm(X[train], y[train], link, ScadParams(float(xi), b), init=init)
            except SolverError:
                continue
            pred = predict(fit, X[val_idx, 1:])
            totals[j] += float(np.mean((y[val_idx] - pred) ** 2))
            counts[j] += 1
    if not counts.any():
        raise AllFoldsFailed("outcome model failed in every fold")
    losses = np.where(counts > 0, totals / np.maximum(counts, 1), np.inf)
    best = min(range(grid.size), key=lambda j: (losses[j], grid[j], j))
    return float(grid[best]), losses


def _arm_xi(xi_a, arm: int):
    if xi_a is None or isinstance(xi_a, str):
        return xi_a
    if np.ndim(xi_a) == 0:
        return float(xi_a)
    return float(xi_a[arm])


def fit_outcome_models(dataset: IntegratedDataset, basis_spec: BasisSpec,
                       mode: OutcomeMode | str = OutcomeMode.TRIAL_ONLY,
                       penalized: bool = False, xi_a="auto", seed=0,
                       grid=None) -> tuple[GlmFit, GlmFit]:
    """Per-arm outcome regressions of ``y`` on ``[1, g(X)]``.

    ``trial_only`` uses the trial rows of each arm; ``pooled_rwe`` adds the
    real-world rows of the same arm. The link follows the outcome type.
    With ``penalized=True`` each arm gets a one-step SCAD fit, its level
    ``xi_a`` taken as given (scalar or per-arm pair) or chosen by 5-fold CV
    when ``"auto"``.
    """
    mode = OutcomeMode(mode)
    link = Link.IDENTITY if dataset.outcome_type is OutcomeType.CONTINUOUS else Link.LOGIT
    names = dataset.schema.names
    G_trial = build_basis(dataset.trial.x, basis_spec, names)
    coef_names = ("(intercept)",) + G_trial.names
    tr = dataset.trial
    if mode is OutcomeMode.POOLED_RWE:
        if not dataset.rwe.has_outcomes:
            raise MissingColumn("y", "rwe (required for pooled outcome models)")
        G_rwe = build_basis(dataset.rwe.x, basis_spec, names).values
        G_all = np.vstack([G_trial.values, G_rwe])
        a_all = np.concatenate([tr.a, dataset.rwe.a])
        y_all = np.concatenate([tr.y, dataset.rwe.y])
    else:
        G_all, a_all, y_all = G_trial.values, tr.a, tr.y

    fits = []
    for arm in (0, 1):
        rows = a_all == arm
        X = with_intercept(G_all[rows])
        y = y_all[rows]
        if X.shape[0] < X.shape[1]:
            raise ArmTooSmall(arm, X.shape[0], X.shape[1])
        init = fit_glm(X, y, link, names=coef_names)
        if not penalized:
            fits.append(init)
            continue
        xi = _arm_xi(xi_a, arm)
        if xi is None or xi == "auto":
            xi, _ = cv_select_outcome_xi(X, y, link, grid=grid, seed=[hash_seed(seed), arm])
        fits.append(fit_scad_glm(X, y, link, ScadParams(float(xi)), init=init, names=coef_names))
    return fits[0], fits[1]


def hash_seed(seed) -> int:
    """Fold an int or int sequence into a 32-bit seed."""
    return int(np.random.SeedSequence(seed).generate_state(1)[0])
