import numpy as np
import pytest

from trialbridge.data import CovariateSchema, IntegratedDataset, OutcomeType, RweSample, TrialSample


def make_dataset(n=200, m=400, p=3, seed=0, binary=False, rwe_outcomes=True, shift=0.3):
    """Small two-sample dataset with selection on the first covariate."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, p))
    x[:, 0] -= shift
    a = np.zeros(n)
    a[rng.permutation(n)[: n // 2]] = 1
    xr = rng.normal(size=(m, p))
    ar = (rng.random(m) < 0.5).astype(float)

    def outcome(x, a):
        eta = 1.0 + x @ np.linspace(1.0, 0.5, p) + 2.0 * a * x[:, 0] + a
        if binary:
            return (rng.random(len(a)) < 1 / (1 + np.exp(-eta / 3))).astype(float)
        return eta + rng.normal(size=len(a))

    trial = TrialSample(x, a, outcome(x, a))
    d = rng.uniform(1.0, 3.0, size=m)
    rwe = RweSample(xr, d, ar, outcome(xr, ar)) if rwe_outcomes else RweSample(xr, d)
    kind = OutcomeType.BINARY if binary else OutcomeType.CONTINUOUS
    return IntegratedDataset(CovariateSchema.default(p), trial, rwe, kind)


@pytest.fixture
def dataset():
    return make_dataset()


@pytest.fixture
def binary_dataset():
    return make_dataset(binary=True, seed=3)
