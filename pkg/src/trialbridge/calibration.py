"""Entropy-balancing calibration weights.

The calibration weights minimize ``sum q log q`` subject to ``sum q = 1`` and
``sum q g(X_i) = g_tilde``. We solve the convex dual

    f(lam) = log sum_i exp(lam' g_i) - lam' g_tilde,

whose gradient is ``sum_i q_i(lam) g_i - g_tilde`` with softmax weights
``q_i(lam)``. A SCAD-penalized version of the same estimating equations gives
data-driven selection of basis columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .basis import BasisMatrix, TargetMoments
from .exceptions import (
    AllFoldsFailed,
    DimensionMismatch,
    EmptyGrid,
    NotConverged,
    SingularJacobian,
    SolverError,
)

ARMIJO_C = 1e-4
LQA_RIDGE = 1e-6
HARD_THRESHOLD = 1e-4
MAX_PENALIZED_ITER = 200


@dataclass(frozen=True)
class ScadParams:
    xi: float = 0.0
    b: float = 3.7

    def __post_init__(self):
        if not self.xi >= 0:
            raise ValueError(f"SCAD xi must be >= 0, got {self.xi}")
        if not self.b > 2:
            raise ValueError(f"SCAD b must exceed 2, got {self.b}")


@dataclass(frozen=True)
class CalibrationSolution:
    lam: np.ndarray
    weights: np.ndarray
    balance_residual: np.ndarray
    selected: np.ndarray
    iterations: int
    converged: bool
    dual_value: float
    names: tuple[str, ...] = ()
    xi: float = 0.0
    history: tuple[float, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        names = self.names or tuple(f"g{k + 1}" for k in range(len(self.lam)))
        return {
            "lambda": [float(v) for v in self.lam],
            "basis": list(names),
            "selected": [n for n, s in zip(names, self.selected) if s],
            "balance_residual": [float(v) for v in self.balance_residual],
            "max_abs_balance_residual": float(np.abs(self.balance_residual).max(initial=0.0)),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "dual_value": float(self.dual_value),
            "xi": float(self.xi),
        }


def _unpack(basis, targets) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
    if isinstance(basis, BasisMatrix):
        G, names = basis.values, basis.names
    else:
        G = np.asarray(basis, dtype=float)
        if G.ndim == 1:
            G = G[:, None]
        names = tuple(f"g{k + 1}" for k in range(G.shape[1]))
    gt = targets.g_tilde if isinstance(targets, TargetMoments) else targets
    gt = np.atleast_1d(np.asarray(gt, dtype=float))
    if gt.shape != (G.shape[1],):
        raise DimensionMismatch(f"basis has {G.shape[1]} columns but targets have {gt.shape}")
    return G, gt, names


def _softmax(G: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, float]:
    """Softmax weights of ``G @ lam`` and the stabilized log-sum-exp."""
    eta = G @ lam
    top = eta.max()
    w = np.exp(eta - top)
    s = w.sum()
    return w / s, float(top + np.log(s))


def dual_objective(lam, basis, targets) -> tuple[float, np.ndarray]:
    """Value and gradient of the calibration dual at ``lam``."""
    G, gt, _ = _unpack(basis, targets)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    q, lse = _softmax(G, lam)
    return lse - float(lam @ gt), q @ G - gt


def _dependent_columns(G: np.ndarray, names: Sequence[str]) -> list[str]:
    """Columns that are constant or in the span of earlier columns (centered)."""
    Gc = G - G.mean(axis=0)
    scale = np.sqrt((Gc ** 2).mean(axis=0))
    magnitude = np.maximum(np.abs(G).max(axis=0), 1.0)
    bad = []
    basis: list[np.ndarray] = []
    for k in range(G.shape[1]):
        if scale[k] <= 1e-12 * magnitude[k]:
            bad.append(names[k])
            continue
        v = Gc[:, k] / (scale[k] * np.sqrt(G.shape[0]))
        r = v.copy()
        for u in basis:
            r -= (u @ r) * u
        norm = np.linalg.norm(r)
        if norm < 1e-7:
            bad.append(names[k])
        else:
            basis.append(r / norm)
    return bad


def _check_rank(G: np.ndarray, names: Sequence[str]) -> None:
    if G.shape[1] == 0:
        return
    Gc = G - G.mean(axis=0)
    scale = np.sqrt((Gc ** 2).mean(axis=0))
    if np.all(scale > 1e-12 * np.maximum(np.abs(G).max(axis=0), 1.0)):
        Z = Gc / scale
        ev = np.linalg.eigvalsh(Z.T @ Z / G.shape[0])
        if ev[0] > 1e-12:
            return
    bad = _dependent_columns(G, names)
    if bad:
        raise SingularJacobian(bad)


def _newton_direction(H: np.ndarray, r: np.ndarray) -> np.ndarray:
    try:
        c, low = linalg.cho_factor(H, check_finite=False)
        return -linalg.cho_solve((c, low), r, check_finite=False)
    except linalg.LinAlgError:
        return -np.linalg.lstsq(H, r, rcond=None)[0]


def _hessian(G: np.ndarray, q: np.ndarray, mu: np.ndarray) -> np.ndarray:
    Gc = G - mu
    return (Gc * q[:, None]).T @ Gc


def _solution(G, gt, lam, names, iterations, converged, history, xi=0.0) -> CalibrationSolution:
    q, lse = _softmax(G, lam)
    lam = lam.copy()
    lam.setflags(write=False)
    q.setflags(write=False)
    return CalibrationSolution(
        lam=lam,
        weights=q,
        balance_residual=q @ G - gt,
        selected=lam != 0,
        iterations=iterations,
        converged=converged,
        dual_value=lse - float(lam @ gt),
        names=tuple(names),
        xi=xi,
        history=tuple(history),
    )


def solve_dual(basis, targets, max_iter: int = 100, grad_tol: float = 1e-9,
               lam_init=None, raise_on_failure: bool = True) -> CalibrationSolution:
    """Unpenalized calibration weights by damped Newton on the dual.

    Armijo backtracking (factor 0.5, ``c=1e-4``) keeps the dual value
    non-increasing. Convergence means ``max |gradient| <= grad_tol``.

    Raises
    ------
    SingularJacobian
        If the centered trial basis is rank deficient.
    NotConverged
        If ``max_iter`` Newton steps do not reach ``grad_tol``.
    """
    G, gt, names = _unpack(basis, targets)
    _check_rank(G, names)
    K = G.shape[1]
    lam = np.zeros(K) if lam_init is None else np.array(lam_init, dtype=float)
    q, lse = _softmax(G, lam)
    value = lse - lam @ gt
    history = [value]
    converged = False
    it = 0
    while True:
        mu = q @ G
        grad = mu - gt
        gnorm = np.abs(grad).max(initial=0.0)
        if gnorm <= grad_tol:
            converged = True
            break
        if it >= max_iter:
            break
        step = _newton_direction(_hessian(G, q, mu), grad)
        slope = float(grad @ step)
        t = 1.0
        if abs(slope) < 1e-13 * (1.0 + abs(value)):
            # Predicted decrease is below rounding; take the Newton step.
            new = lam + step
            q, lse = _softmax(G, new)
            new_value = lse - new @ gt
        else:
            while True:
                new = lam + t * step
                q, lse = _softmax(G, new)
                new_value = lse - new @ gt
                if new_value <= value + ARMIJO_C * t * slope:
                    break
                t *= 0.5
                if t < 1e-14:
                    break
            if t < 1e-14:
                lam_fail = lam
                if raise_on_failure:
                    raise NotConverged("calibration line search stalled", lam_fail, gnorm, it)
                q, _ = _softmax(G, lam)
                break
        lam = new
        value = new_value
        history.append(value)
        it += 1
    if not converged and raise_on_failure:
        raise NotConverged("calibration dual did not converge", lam, gnorm, it)
    return _solution(G, gt, lam, names, it, converged, history)


# -- SCAD ---------------------------------------------------------------------


def scad_derivative(t, params: ScadParams):
    """SCAD penalty derivative at ``t >= 0``.

    ``xi {I(t < xi) + (b xi - t)_+ / ((b - 1) xi) I(t >= xi)}``.
    """
    xi, b = params.xi, params.b
    t = np.asarray(t, dtype=float)
    if xi == 0:
        out = np.zeros_like(t)
    else:
        out = xi * np.where(t < xi, 1.0, np.maximum(b * xi - t, 0.0) / ((b - 1.0) * xi))
    return out if out.ndim else float(out)


def scad_penalty(t, params: ScadParams):
    """SCAD penalty value at ``t >= 0`` (the antiderivative of the above)."""
    xi, b = params.xi, params.b
    t = np.abs(np.asarray(t, dtype=float))
    mid = (2 * b * xi * t - t * t - xi * xi) / (2 * (b - 1))
    out = np.where(t <= xi, xi * t, np.where(t <= b * xi, mid, xi * xi * (b + 1) / 2))
    return out if out.ndim else float(out)


def penalized_dual_value(lam, basis, targets, params: ScadParams) -> float:
    value, _ = dual_objective(lam, basis, targets)
    return value + float(np.sum(scad_penalty(np.abs(lam), params)))


def solve_penalized_dual(basis, targets, params: ScadParams,
                         max_iter: int = MAX_PENALIZED_ITER, grad_tol: float = 1e-9,
                         lam_init=None, raise_on_failure: bool = True) -> CalibrationSolution:
    """SCAD-penalized calibration weights.

    Solves the penalized estimating equations
    ``U(lam) + q_xi(|lam|) sign(lam) = 0`` on the active (nonzero) set by
    damped Newton steps ``(J + D) step = -U_xi``, starting from the
    unpenalized solution. ``D`` is the exact curvature of the SCAD term when
    that keeps the system positive definite, otherwise the local quadratic
    approximation ``diag(q_xi(|lam_k|) / (|lam_k| + 1e-6))``. A component
    whose step crosses zero is clipped to zero and leaves the active set;
    after convergence components below ``1e-4`` are zeroed and the system is
    re-solved. The merit function for backtracking is the penalized dual.
    """
    G, gt, names = _unpack(basis, targets)
    if params.xi == 0:
        sol = solve_dual(G, gt, grad_tol=grad_tol, lam_init=lam_init,
                         raise_on_failure=raise_on_failure)
        return _solution(G, gt, sol.lam, names, sol.iterations, sol.converged, sol.history)
    if lam_init is None:
        lam = solve_dual(G, gt, grad_tol=grad_tol).lam.copy()
    else:
        lam = np.array(lam_init, dtype=float)
    xi, b = params.xi, params.b
    active = lam != 0
    reactivations = 0
    history = []
    converged = False
    rnorm = np.inf
    it = 0
    while True:
        if not active.any():
            converged = True
            break
        Ga, gta, la = G[:, active], gt[active], lam[active]
        q, lse = _softmax(Ga, la)
        mu = q @ Ga
        absl = np.abs(la)
        sgn = np.sign(la)
        r = mu - gta + scad_derivative(absl, params) * sgn
        merit = lse - la @ gta + float(np.sum(scad_penalty(absl, params)))
        history.append(merit)
        rnorm = np.abs(r).max()
        if rnorm <= grad_tol:
            small = active & (np.abs(lam) < HARD_THRESHOLD)
            if small.any():
                lam[small] = 0.0
                active &= ~small
                continue
            # Zero components must satisfy the subgradient condition |U_k| <= xi.
            _, grad_full = dual_objective(lam, G, gt)
            viol = ~active & (np.abs(grad_full) > xi * (1 + 1e-9) + grad_tol)
            if viol.any() and reactivations < 2 * G.shape[1]:
                k = int(np.argmax(np.where(viol, np.abs(grad_full), -np.inf)))
                lam[k] = -np.sign(grad_full[k]) * HARD_THRESHOLD
                active[k] = True
                reactivations += 1
                continue
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        H = _hessian(Ga, q, mu)
        curv = np.where((absl >= xi) & (absl < b * xi), -1.0 / (b - 1.0), 0.0)
        try:
            c, low = linalg.cho_factor(H + np.diag(curv), check_finite=False)
            step = -linalg.cho_solve((c, low), r, check_finite=False)
        except linalg.LinAlgError:
            E = scad_derivative(absl, params) / (absl + LQA_RIDGE)
            step = _newton_direction(H + np.diag(E), r)
        crossing = np.sign(la + step) != sgn
        t_max = float(np.min(-la[crossing] / step[crossing])) if crossing.any() else 1.0
        t = min(1.0, t_max)
        slope = float(r @ step)
        while True:
            new = la + t * step
            if t == t_max:
                new[crossing & (np.abs(-la / np.where(step == 0, 1, step) - t_max) <= 1e-12)] = 0.0
            _, lse_new = _softmax(Ga, new)
            m_new = lse_new - new @ gta + float(np.sum(scad_penalty(np.abs(new), params)))
            if m_new <= merit + ARMIJO_C * t * slope or abs(slope) < 1e-13 * (1 + abs(merit)):
                break
            t *= 0.5
            if t < 1e-14:
                break
        if t < 1e-14:
            break
        lam[active] = new
        active = lam != 0
    if not converged and raise_on_failure:
        raise NotConverged("penalized calibration did not converge", lam, rnorm, it)
    return _solution(G, gt, lam, names, it, converged, history, xi=params.xi)


# -- cross-validation over xi -------------------------------------------------


def default_xi_grid(basis, targets, points: int = 20) -> np.ndarray:
    """``points`` values log-spaced over ``[1e-4, 1] * max|gradient at 0|``."""
    value, grad = dual_objective(np.zeros(_unpack(basis, targets)[0].shape[1]), basis, targets)
    top = float(np.abs(grad).max())
    if top == 0:
        return np.array([0.0])
    return np.geomspace(1e-4 * top, top, points)


def fold_indices(n: int, folds: int, seed) -> list[np.ndarray]:
    """Seeded shuffle of ``range(n)`` split into ``folds`` near-equal parts."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def balance_loss(lam: np.ndarray, G_val: np.ndarray, gt: np.ndarray) -> float:
    """Held-out balance loss ``sum q_i ||g_i - g_tilde||_2 / K_hat``.

    Weights are renormalized over the held-out rows; ``K_hat`` is the number
    of nonzero multipliers and an all-zero fit scores ``+inf``.
    """
    k_hat = int(np.count_nonzero(lam))
    if k_hat == 0:
        return np.inf
    q, _ = _softmax(G_val, lam)
    dist = np.linalg.norm(G_val - gt, axis=1)
    return float(q @ dist) / k_hat


def cv_select_xi(basis, targets, grid=None, folds: int = 5, seed=0,
                 b: float = 3.7) -> tuple[float, np.ndarray]:
    """Pick the SCAD level ``xi`` by ``folds``-fold CV on the balance loss.

    Returns ``(xi_star, cv_losses)`` where ``cv_losses[j]`` is the mean loss
    over the folds that fit successfully at ``grid[j]``. Ties go to the
    smaller ``xi``, then to the earlier grid position.
    """
    G, gt, names = _unpack(basis, targets)
    grid = default_xi_grid(G, gt) if grid is None else np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise EmptyGrid("xi grid is empty")
    n = G.shape[0]
    if n < folds:
        raise DimensionMismatch(f"{n} trial rows cannot be split into {folds} folds")
    totals = np.zeros(grid.size)
    counts = np.zeros(grid.size, dtype=int)
    cache: dict[float, float] = {}
    for val_idx in fold_indices(n, folds, seed):
        train = np.ones(n, dtype=bool)
        train[val_idx] = False
        G_tr, G_val = G[train], G[val_idx]
        try:
            lam_u = solve_dual(G_tr, gt).lam
        except SolverError:
            continue
        cache.clear()
        for j, xi in enumerate(grid):
            key = float(xi)
            if key not in cache:
                try:
                    sol = solve_penalized_dual(G_tr, gt, ScadParams(key, b), lam_init=lam_u)
                    cache[key] = balance_loss(sol.lam, G_val, gt)
                except SolverError:
                    cache[key] = np.nan
            loss = cache[key]
            if not np.isnan(loss):
                totals[j] += loss
                counts[j] += 1
    if not counts.any():
        raise AllFoldsFailed("calibration failed in every fold for every xi")
    with np.errstate(invalid="ignore", divide="ignore"):
        losses = np.where(counts > 0, totals / np.maximum(counts, 1), np.inf)
    best = min(range(grid.size), key=lambda j: (losses[j], grid[j], j))
    return float(grid[best]), losses
