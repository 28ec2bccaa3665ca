"""Independent reference computations used by the tests."""

import itertools

import numpy as np
from scipy.optimize import minimize


def primal_entropy_weights(G, gt):
    """Minimize sum q log q subject to sum q = 1 and q'G = gt, by SLSQP on the primal."""
    n = G.shape[0]
    cons = [{"type": "eq", "fun": lambda q: q.sum() - 1.0, "jac": lambda q: np.ones(n)},
            {"type": "eq", "fun": lambda q: q @ G - gt, "jac": lambda q: G.T}]
    res = minimize(lambda q: float(q @ np.log(q)), np.full(n, 1.0 / n),
                   jac=lambda q: np.log(q) + 1.0, constraints=cons,
                   bounds=[(1e-12, 1.0)] * n, method="SLSQP",
                   options={"ftol": 1e-15, "maxiter": 1000})
    assert res.success, res.message
    return res.x


def best_subset(objective, K, starts=(-1.0, -0.1, 0.1, 1.0)):
    """Global minimizer of ``objective`` over all supports of a K-vector."""
    best = (objective(np.zeros(K)), (), np.zeros(K))
    for r in range(1, K + 1):
        for support in itertools.combinations(range(K), r):
            def restricted(v):
                lam = np.zeros(K)
                lam[list(support)] = v
                return objective(lam)
            for s in starts:
                res = minimize(restricted, np.full(r, s), method="Nelder-Mead",
                               options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 20000})
                if res.fun < best[0] - 1e-12:
                    lam = np.zeros(K)
                    lam[list(support)] = res.x
                    best = (res.fun, support, lam)
    return best


def grid_minimize(objective, axes):
    """Brute-force minimum of ``objective`` over the Cartesian product of ``axes``."""
    best = (np.inf, None)
    for point in itertools.product(*axes):
        v = objective(np.array(point))
        if v < best[0]:
            best = (v, np.array(point))
    return best
