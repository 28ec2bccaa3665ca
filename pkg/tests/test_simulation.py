import io
import json

import numpy as np
import pytest

from trialbridge.data import OutcomeType
from trialbridge.estimators import EstimatorConfig
from trialbridge.exceptions import DataValidationError, ReplicateDataError
from trialbridge.simulation import (
    STREAM_POPULATION,
    STREAM_SAMPLES,
    ReplicateResult,
    Scenario,
    ScenarioConfig,
    draw_samples,
    expected_selection_rate,
    generate_population,
    intercept_for_rate,
    kang_schafer,
    replicate_rng,
    run_monte_carlo,
    summaries_to_json,
    summarize,
    write_replicates_csv,
    write_summary_csv,
)

# mean of expit(1 - 2 X1 - X2 - X3 + X4) - expit(1 - X2 - X3 + X4), X ~ N(1, 1)^4,
# from 1e7 draws (MC SE 8e-5)
BINARY_SUPERPOPULATION_TAU = -0.2358


def population(scenario=1, outcome="continuous", rep=0, seed=0):
    cfg = ScenarioConfig(outcome_type=outcome, scenario=scenario, seed=seed)
    return cfg, generate_population(cfg, replicate_rng(seed, rep, STREAM_POPULATION))


def test_continuous_truth():
    _, pop = population()
    assert pop.tau == pytest.approx(27.4 * pop.x[:, 0].mean(), abs=0.05)
    assert pop.tau == pytest.approx(27.4, abs=0.3)


def test_binary_truth():
    _, pop = population(outcome="binary")
    assert np.mean(pop.p1 - pop.p0) == pytest.approx(BINARY_SUPERPOPULATION_TAU, abs=0.005)
    assert round(np.mean(pop.p1 - pop.p0), 2) == -0.24
    assert set(np.unique(pop.y0)) <= {0.0, 1.0}


def test_transform_is_standardized():
    x = np.random.default_rng(0).normal(1, 1, size=(20_000, 4))
    xs = kang_schafer(x)
    np.testing.assert_allclose(xs.mean(axis=0), 1, atol=1e-10)
    np.testing.assert_allclose(xs.var(axis=0), 1, atol=1e-10)


def test_transform_ordering():
    x = np.random.default_rng(1).normal(1, 1, size=(1000, 4))
    xs = kang_schafer(x)
    raw0 = np.exp(x[:, 0] / 3)
    assert np.corrcoef(xs[:, 0], raw0)[0, 1] == pytest.approx(1.0)
    assert np.corrcoef(xs[:, 3], x[:, 0] + x[:, 3])[0, 1] == pytest.approx(1.0)


def test_misspecified_outcome_uses_transform():
    _, pop = population(scenario=3)
    z = pop.x_star
    base = -100 + 13.7 * z[:, 1:].sum(axis=1)
    resid = pop.y0 - base
    assert resid.mean() == pytest.approx(0.0, abs=0.02)
    assert resid.std() == pytest.approx(1.0, abs=0.02)


def test_trial_size_and_design_weights():
    cfg = ScenarioConfig(seed=5)
    sizes = []
    for rep in range(100):
        pop = generate_population(cfg, replicate_rng(5, rep, STREAM_POPULATION))
        ds, truth = draw_samples(pop, cfg, replicate_rng(5, rep, STREAM_SAMPLES))
        sizes.append(ds.n)
        assert np.all(truth.trial_rows < cfg.pop_size_half)
        assert np.all(truth.rwe_rows >= cfg.pop_size_half)
    assert 900 <= np.mean(sizes) <= 1100
    assert ds.m == 5000 and np.all(ds.rwe.d == 10.0)
    assert ds.rwe.has_outcomes


def test_scenario_flags():
    assert [s.label for s in Scenario] == ["1. O:C/S:C", "2. O:C/S:W", "3. O:W/S:C", "4. O:W/S:W"]
    assert Scenario.parse("4") is Scenario.S4_OW_SW
    assert Scenario.parse("s2") is Scenario.S2_OC_SW
    with pytest.raises(DataValidationError):
        Scenario.parse("7")


def test_large_n_intercept():
    cfg = ScenarioConfig.large_n(scenario=4)
    assert cfg.pop_size_half == 250_000 and cfg.rwe_size == 10_000
    assert expected_selection_rate(cfg.rct_logit_intercept) == pytest.approx(0.009, rel=1e-9)
    assert cfg.rct_logit_intercept == pytest.approx(-3.3667, abs=1e-3)
    # the default intercept gives the stated ~2% selection rate
    assert expected_selection_rate(-2.5) == pytest.approx(0.02, abs=0.002)
    assert intercept_for_rate(expected_selection_rate(-2.5)) == pytest.approx(-2.5, abs=1e-9)


def test_config_validation():
    with pytest.raises(DataValidationError):
        ScenarioConfig(reps=0)
    with pytest.raises(DataValidationError):
        ScenarioConfig(B=1)
    with pytest.raises(DataValidationError):
        run_monte_carlo(ScenarioConfig(reps=1, B=0), ["naive"])


def small(**kw):
    base = dict(pop_size_half=5000, rwe_size=500, rct_logit_intercept=-1.0, reps=4, B=3, seed=9)
    base.update(kw)
    return ScenarioConfig(**base)


def test_small_run_is_thread_invariant():
    cfg = small()
    a = run_monte_carlo(cfg, ["naive", "cw", "acw"], threads=1)
    b = run_monte_carlo(cfg, ["naive", "cw", "acw"], threads=2)
    assert summaries_to_json([a], 9) == summaries_to_json([b], 9)
    assert [r.rep for r in a.replicates] == [0, 1, 2, 3]


def test_two_reps_summary():
    s = run_monte_carlo(small(reps=2), ["naive", "acw"])
    for e in s.estimators:
        assert np.isfinite([e.bias, e.mc_variance, e.coverage_pct]).all()
        assert e.coverage_pct in (0.0, 50.0, 100.0)


def test_summary_arithmetic():
    cfg = small()
    results = [ReplicateResult(0, 1.0, 10, (1.5,), (1.0,), (0,)),
               ReplicateResult(1, 2.0, 12, (1.0,), (0.1,), (0,)),
               ReplicateResult(2, 1.0, 14, (1.0,), (np.nan,), (2,))]
    s = summarize(cfg, ["x"], results).estimators[0]
    err = np.array([0.5, -1.0, 0.0])
    assert s.bias == pytest.approx(err.mean())
    assert s.mc_variance == pytest.approx(err.var(ddof=1))
    assert s.mc_se_bias == pytest.approx(np.sqrt(err.var(ddof=1) / 3))
    assert s.mean_boot_variance == pytest.approx((1.0 + 0.01) / 2)
    assert s.coverage_pct == 50.0 and s.reps_with_se == 2
    assert s.rel_bias_boot_var_pct == pytest.approx(100 * (0.505 - s.mc_variance) / s.mc_variance)


def test_binary_run():
    s = run_monte_carlo(small(outcome_type="binary", B=0), ["naive", "cw"])
    assert s.config.outcome_type is OutcomeType.BINARY
    assert np.isnan(s.estimators[0].coverage_pct)


def test_replicate_index_attached_to_errors():
    # a one-row RWE sample cannot be standardized, which is a data error
    cfg = small(rwe_size=1, B=0)
    with pytest.raises(ReplicateDataError) as err:
        run_monte_carlo(cfg, [EstimatorConfig("cw")])
    assert err.value.replicate == 0


def test_outputs():
    s = run_monte_carlo(small(), ["naive", "cw"])
    buf = io.StringIO()
    write_summary_csv([s], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ("outcome_type,scenario,estimator,bias,mc_var,mc_se_bias,rel_bias_boot_pct,"
                        "coverage_pct,reps_completed,seed")
    assert len(lines) == 3
    payload = json.loads(summaries_to_json([s], 9))
    assert payload["seed"] == 9
    rep = io.StringIO()
    write_replicates_csv([s], rep)
    rows = rep.getvalue().splitlines()
    assert rows[0].split(",")[:6] == ["outcome_type", "scenario", "seed", "rep", "tau_true", "n"]
    assert len(rows) == 5
