import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialbridge.basis import (
    BasisSpec,
    Degree,
    basis_names,
    build_basis,
    fit_standardization,
    n_basis_terms,
    target_moments,
)
from trialbridge.data import RweSample
from trialbridge.exceptions import DegenerateColumn, DimensionMismatch


def test_quadratic_p4_has_14_columns():
    x = np.random.default_rng(0).normal(size=(10, 4))
    assert build_basis(x, BasisSpec(Degree.QUADRATIC)).K == 14


def test_linear_identity():
    np.testing.assert_array_equal(build_basis(np.array([[2.0]]), BasisSpec()).values, [[2.0]])


def test_quadratic_monomials_and_order():
    g = build_basis(np.array([[1.0, 2.0]]), BasisSpec(Degree.QUADRATIC))
    np.testing.assert_array_equal(g.values, [[1.0, 2.0, 2.0, 1.0, 4.0]])
    assert g.names == ("x1", "x2", "x1:x2", "x1^2", "x2^2")


def test_names_for_three_covariates():
    assert basis_names(["a", "b", "c"], "quadratic_full") == (
        "a", "b", "c", "a:b", "a:c", "b:c", "a^2", "b^2", "c^2")


@given(st.integers(1, 12))
def test_term_count(p):
    assert n_basis_terms(p, Degree.QUADRATIC) == 2 * p + p * (p - 1) // 2
    x = np.ones((1, p))
    assert build_basis(x, BasisSpec(Degree.QUADRATIC)).K == n_basis_terms(p, "quadratic_full")


def test_weighted_standardization_hand_values():
    center, scale = fit_standardization(np.array([[0.0], [2.0]]), np.array([1.0, 3.0]))
    assert center[0] == pytest.approx(1.5, abs=1e-15)
    assert scale[0] == pytest.approx(np.sqrt(0.75), abs=1e-15)


def test_equal_weights_match_unweighted():
    x = np.random.default_rng(1).normal(size=(30, 3))
    center, scale = fit_standardization(x, np.full(30, 4.0))
    np.testing.assert_allclose(center, x.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(scale, x.std(axis=0), atol=1e-14)


def test_constant_column_is_degenerate():
    x = np.column_stack([np.arange(5.0), np.ones(5)])
    with pytest.raises(DegenerateColumn):
        fit_standardization(x, np.ones(5))


def test_standardized_main_effects():
    x = np.random.default_rng(2).normal(3, 2, size=(50, 3))
    center, scale = fit_standardization(x, np.ones(50))
    g = build_basis(x, BasisSpec(Degree.QUADRATIC, center, scale)).values[:, :3]
    np.testing.assert_allclose(g.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(g.var(axis=0), 1, atol=1e-12)


def test_target_moments():
    rwe = RweSample(np.array([[0.0], [2.0]]), [1.0, 3.0])
    tm = target_moments(rwe, BasisSpec(Degree.QUADRATIC))
    # g = (x, x^2) -> weighted means (1.5, 3)
    np.testing.assert_allclose(tm.g_tilde, [1.5, 3.0], atol=1e-15)
    assert tm.total_design_weight == 4.0


def test_target_moments_scalar_hand_value():
    # g values (0, 4) with d = (1, 3) -> 3
    rwe = RweSample(np.array([[0.0], [4.0]]), [1.0, 3.0])
    assert target_moments(rwe, BasisSpec()).g_tilde[0] == pytest.approx(3.0, abs=1e-15)


def test_target_moments_uniform_and_singleton():
    x = np.random.default_rng(3).normal(size=(7, 2))
    spec = BasisSpec(Degree.QUADRATIC)
    tm = target_moments(RweSample(x, np.ones(7)), spec)
    np.testing.assert_allclose(tm.g_tilde, build_basis(x, spec).values.mean(axis=0), atol=1e-14)
    one = target_moments(RweSample(x[:1], [5.0]), spec)
    np.testing.assert_allclose(one.g_tilde, build_basis(x[:1], spec).values[0], atol=1e-15)


def test_deterministic_columns():
    x = np.random.default_rng(4).normal(size=(20, 4))
    spec = BasisSpec(Degree.QUADRATIC, x.mean(0), x.std(0))
    assert np.array_equal(build_basis(x, spec).values, build_basis(x.copy(), spec).values)


def test_dimension_checks():
    spec = BasisSpec(Degree.LINEAR, (0.0, 0.0), (1.0, 1.0))
    with pytest.raises(DimensionMismatch):
        build_basis(np.zeros((3, 3)), spec)
    with pytest.raises(DimensionMismatch):
        build_basis(np.zeros(3), BasisSpec())


def test_spec_validation():
    with pytest.raises(ValueError):
        BasisSpec(include_intercept=True)
    with pytest.raises(ValueError):
        BasisSpec(Degree.LINEAR, (0.0,), (0.0,))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(1, 4), st.integers(0, 10_000))
def test_property_weighted_moments(m, p, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, p))
    x[0] += 1.0  # guarantee non-constant columns
    d = rng.uniform(0.5, 2.0, size=m)
    center, scale = fit_standardization(x, d)
    z = (x - center) / scale
    np.testing.assert_allclose(d @ z / d.sum(), 0, atol=1e-10)
    np.testing.assert_allclose(d @ z ** 2 / d.sum(), 1, atol=1e-10)
