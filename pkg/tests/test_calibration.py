import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialbridge.basis import BasisMatrix, BasisSpec, TargetMoments
from trialbridge.calibration import (
    ScadParams,
    balance_loss,
    cv_select_xi,
    default_xi_grid,
    dual_objective,
    fold_indices,
    penalized_dual_value,
    scad_derivative,
    scad_penalty,
    solve_dual,
    solve_penalized_dual,
)
from trialbridge.exceptions import EmptyGrid, NotConverged, SingularJacobian

from oracles import best_subset, primal_entropy_weights

# brentq on the scalar balance equation for g = (-1, 0, 1, 2), target 0.2
SCALAR_LAMBDA = -0.24402565852464458


def random_instance(rng, n, K):
    G = rng.normal(size=(n, K))
    gt = rng.dirichlet(np.ones(n)) @ G  # strictly inside the convex hull
    return G, gt


def test_scalar_root():
    sol = solve_dual(np.array([[-1.0], [0.0], [1.0], [2.0]]), [0.2])
    assert sol.lam[0] == pytest.approx(SCALAR_LAMBDA, abs=1e-9)
    assert sol.converged


def test_weights_and_balance_on_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        n, K = int(rng.integers(20, 201)), int(rng.integers(1, 11))
        G, gt = random_instance(rng, n, K)
        sol = solve_dual(G, gt)
        assert sol.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(sol.weights > 0)
        assert np.abs(sol.weights @ G - gt).max() <= 1e-8
        assert np.abs(sol.balance_residual).max() <= 1e-8


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(10):
        G, gt = random_instance(rng, 60, 4)
        lam = rng.normal(scale=0.5, size=4)
        _, grad = dual_objective(lam, G, gt)
        for k in range(4):
            h = 1e-6 * (1 + abs(lam[k]))
            up, dn = lam.copy(), lam.copy()
            up[k] += h
            dn[k] -= h
            fd = (dual_objective(up, G, gt)[0] - dual_objective(dn, G, gt)[0]) / (2 * h)
            assert fd == pytest.approx(grad[k], rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_matches_primal_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(3, 7))
    K = int(rng.integers(1, n - 1))
    G, gt = random_instance(rng, n, K)
    q = primal_entropy_weights(G, gt)
    np.testing.assert_allclose(solve_dual(G, gt).weights, q, atol=1e-5)


def test_dual_value_is_monotone():
    G, gt = random_instance(np.random.default_rng(3), 100, 5)
    hist = np.array(solve_dual(G, gt * 3).history)
    assert np.all(np.diff(hist) <= 1e-12)


def test_zero_target_shift_gives_uniform_weights():
    G = np.random.default_rng(4).normal(size=(30, 2))
    sol = solve_dual(G, G.mean(axis=0))
    np.testing.assert_allclose(sol.weights, 1 / 30, atol=1e-10)


def test_accepts_basis_objects():
    G, gt = random_instance(np.random.default_rng(5), 40, 2)
    sol = solve_dual(BasisMatrix(G, BasisSpec(), ("u", "v")), TargetMoments(gt, 10.0))
    assert sol.names == ("u", "v")
    assert sol.to_dict()["basis"] == ["u", "v"]


def test_collinear_basis_is_singular():
    x = np.random.default_rng(6).normal(size=(30, 1))
    with pytest.raises(SingularJacobian):
        solve_dual(np.hstack([x, 2 * x]), [0.1, 0.2])


def test_infeasible_target_does_not_converge():
    G = np.array([[0.0], [1.0], [2.0]])
    with pytest.raises(NotConverged):
        solve_dual(G, [5.0])


# -- SCAD ---------------------------------------------------------------------


@pytest.mark.parametrize("xi", [0.5, 0.3, 1.7])
def test_scad_derivative_pieces(xi):
    b = 3.7
    p = ScadParams(xi)
    t = np.array([0, 0.5 * xi, xi, 2 * xi, b * xi, 2 * b * xi])
    expected = [xi, xi, xi * (b * xi - xi) / ((b - 1) * xi), xi * (b * xi - 2 * xi) / ((b - 1) * xi),
                0.0, 0.0]
    np.testing.assert_array_equal(scad_derivative(t, p), expected)


def test_scad_penalty_is_antiderivative():
    p = ScadParams(0.4)
    t = np.linspace(0, 3, 3001)
    dense = np.concatenate([[0.0], np.cumsum(np.diff(t) * 0.5 * (scad_derivative(t[1:], p)
                                                                 + scad_derivative(t[:-1], p)))])
    np.testing.assert_allclose(scad_penalty(t, p), dense, atol=1e-6)
    assert scad_penalty(10.0, p) == pytest.approx(0.16 * 4.7 / 2)


def test_scad_params_validation():
    with pytest.raises(ValueError):
        ScadParams(-1.0)
    with pytest.raises(ValueError):
        ScadParams(0.1, b=2.0)


def test_zero_xi_equals_unpenalized():
    G, gt = random_instance(np.random.default_rng(8), 120, 6)
    a, b = solve_dual(G, gt), solve_penalized_dual(G, gt, ScadParams(0.0))
    np.testing.assert_allclose(b.lam, a.lam, atol=1e-8)
    np.testing.assert_allclose(b.weights, a.weights, atol=1e-8)
    assert b.selected.all()


@pytest.fixture
def toy():
    rng = np.random.default_rng(5)
    G = rng.normal(size=(80, 2))
    return G, G.mean(axis=0) + np.array([0.6, 0.01])


@pytest.mark.parametrize("xi", [0.01, 0.05, 0.1, 0.3])
def test_two_term_selection_matches_subset_enumeration(toy, xi):
    G, gt = toy
    p = ScadParams(xi)
    sol = solve_penalized_dual(G, gt, p)
    value, support, lam = best_subset(lambda v: penalized_dual_value(v, G, gt, p), 2)
    assert tuple(np.flatnonzero(sol.selected)) == support
    np.testing.assert_allclose(sol.lam, lam, atol=1e-6)
    assert penalized_dual_value(sol.lam, G, gt, p) <= value + 1e-10


def test_selection_frozen_supports(toy):
    G, gt = toy
    supports = [tuple(solve_penalized_dual(G, gt, ScadParams(x)).selected) for x in (0.05, 0.1, 10.0)]
    assert supports == [(True, True), (True, False), (False, False)]


def test_large_xi_zeroes_everything(toy):
    G, gt = toy
    sol = solve_penalized_dual(G, gt, ScadParams(10.0))
    assert not sol.selected.any()
    np.testing.assert_allclose(sol.weights, 1 / 80)


def test_penalized_stationarity_on_active_set():
    G, gt = random_instance(np.random.default_rng(9), 150, 5)
    p = ScadParams(0.02)
    sol = solve_penalized_dual(G, gt, p)
    act = sol.selected
    _, grad = dual_objective(sol.lam, G, gt)
    score = grad[act] + scad_derivative(np.abs(sol.lam[act]), p) * np.sign(sol.lam[act])
    assert np.abs(score).max() <= 1e-8
    # inactive coordinates satisfy the subgradient condition
    assert np.all(np.abs(grad[~act]) <= p.xi + 1e-8)


# -- cross-validation ---------------------------------------------------------


def test_folds_partition():
    folds = fold_indices(23, 5, 1)
    assert sorted(np.concatenate(folds).tolist()) == list(range(23))
    assert sorted(len(f) for f in folds) == [4, 4, 5, 5, 5]
    assert all(np.array_equal(a, b) for a, b in zip(folds, fold_indices(23, 5, 1)))


def test_balance_loss_hand_value():
    G_val = np.array([[0.0, 0.0], [3.0, 4.0]])
    lam = np.array([0.0, 0.0])
    assert balance_loss(lam, G_val, np.zeros(2)) == np.inf
    lam = np.array([np.log(3.0) / 3, 0.0])  # weights 1/4, 3/4
    assert balance_loss(lam, G_val, np.zeros(2)) == pytest.approx(0.75 * 5.0)


def reference_cv(G, gt, grid, folds=5, seed=0):
    n = G.shape[0]
    losses = []
    for xi in grid:
        per_fold = []
        for val in fold_indices(n, folds, seed):
            train = np.setdiff1d(np.arange(n), val)
            lam = solve_penalized_dual(G[train], gt, ScadParams(xi)).lam
            k = np.count_nonzero(lam)
            if k == 0:
                per_fold.append(np.inf)
                continue
            eta = G[val] @ lam
            w = np.exp(eta - eta.max())
            w /= w.sum()
            per_fold.append(w @ np.sqrt(((G[val] - gt) ** 2).sum(axis=1)) / k)
        losses.append(np.mean(per_fold))
    return np.array(losses)


def test_cv_matches_reference_implementation():
    G, gt = random_instance(np.random.default_rng(10), 100, 4)
    gt = gt + np.array([0.3, 0.0, 0.0, 0.0])
    grid = [0.001, 0.02, 0.2]
    xi, losses = cv_select_xi(G, gt, grid=grid, seed=3)
    ref = reference_cv(G, gt, grid, seed=3)
    np.testing.assert_allclose(losses, ref, rtol=1e-10)
    assert xi == grid[int(np.argmin(ref))]


def test_cv_ties_pick_smaller_xi():
    G, gt = random_instance(np.random.default_rng(11), 60, 2)
    xi, losses = cv_select_xi(G, gt, grid=[0.5, 0.1, 0.1], seed=0)
    assert losses[1] == losses[2]
    if losses[0] == losses[1]:
        assert xi == 0.1


def test_cv_empty_grid():
    G, gt = random_instance(np.random.default_rng(12), 30, 2)
    with pytest.raises(EmptyGrid):
        cv_select_xi(G, gt, grid=[])


def test_default_grid_spans_gradient():
    G, gt = random_instance(np.random.default_rng(13), 30, 3)
    grid = default_xi_grid(G, gt)
    top = np.abs(G.mean(axis=0) - gt).max()
    assert grid.size == 20
    assert grid[-1] == pytest.approx(top)
    assert grid[0] == pytest.approx(1e-4 * top)


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 200), st.integers(1, 6), st.integers(0, 2 ** 32 - 1))
def test_property_balance(n, K, seed):
    G, gt = random_instance(np.random.default_rng(seed), n, K)
    sol = solve_dual(G, gt)
    assert np.all(sol.weights > 0)
    assert sol.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.abs(sol.balance_residual).max() <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.0, 30.0))
def test_property_scad_derivative_bounds(xi, t):
    d = scad_derivative(t, ScadParams(xi))
    assert 0.0 <= d <= xi * (1 + 1e-12)  # the literal form rounds at t = xi
    if t >= 3.7 * xi:
        assert d == 0.0
