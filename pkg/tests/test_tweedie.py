import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tweediemix import tweedie
from tweediemix.tweedie import TweedieSpec, rvs, sample, variance_function, zero_probability


def test_variance_function_examples():
    assert variance_function(2.0, 0.0) == 1.0
    assert variance_function(3.0, 1.0) == 3.0
    assert variance_function(3.0, 2.0) == 9.0
    assert_allclose(variance_function(np.array([1.0, 4.0]), 1.5), [1.0, 8.0])


def test_variance_function_rejects_nonpositive_mean():
    with pytest.raises(ValueError):
        variance_function(0.0, 2.0)


@pytest.mark.parametrize("power", [0.5, -1.0, np.nan])
def test_invalid_power(power):
    with pytest.raises(ValueError, match="0 < r < 1"):
        TweedieSpec(power, 1.0, 1.0)


def test_spec_variance():
    assert TweedieSpec(2.0, 3.0, 0.5).variance == pytest.approx(4.5)


@given(
    power=st.sampled_from([1.0, 1.3, 2.0, 2.5, 3.0]),
    mu=st.floats(0.1, 50.0),
    scale=st.floats(0.1, 10.0),
)
def test_variance_function_scales(power, mu, scale):
    # V(c mu) = c**r V(mu)
    assert_allclose(variance_function(scale * mu, power), scale**power * variance_function(mu, power), rtol=1e-12)


@pytest.mark.parametrize(
    "power,mean,disp",
    [(0.0, 1.5, 0.7), (1.0, 3.0, 0.5), (1.0, 2.0, 1.0), (1.5, 2.0, 0.4), (2.0, 1.6, 0.3),
     (2.5, 1.2, 0.2), (3.0, 1.6, 0.2), (4.0, 0.8, 0.3)],
)
def test_sampler_moments(power, mean, disp):
    rng = np.random.default_rng(int(power * 100 + mean * 10))
    n = 200_000
    x = rvs(power, np.full(n, mean), disp, rng)
    var = disp * mean**power
    se_mean = np.sqrt(var / n)
    assert abs(x.mean() - mean) < 4 * se_mean
    # variance of the sample variance estimated from the fourth central moment
    m4 = np.mean((x - x.mean()) ** 4)
    se_var = np.sqrt((m4 - x.var() ** 2) / n)
    assert abs(x.var() - var) < 4 * se_var


def test_compound_poisson_zero_mass():
    rng = np.random.default_rng(3)
    power, mean, disp = 1.5, 1.2, 0.8
    n = 200_000
    x = rvs(power, np.full(n, mean), disp, rng)
    p0 = zero_probability(mean, disp, power)
    assert p0 == pytest.approx(np.exp(-mean ** (2 - power) / (disp * (2 - power))))
    assert abs(np.mean(x == 0) - p0) < 4 * np.sqrt(p0 * (1 - p0) / n)


@pytest.mark.parametrize("power", [1.0, 2.0, 3.0])
def test_zero_probability_outside_compound_poisson(power):
    with pytest.raises(ValueError):
        zero_probability(1.0, 1.0, power)


def test_support():
    rng = np.random.default_rng(0)
    pois = rvs(1.0, np.full(1000, 2.0), 0.5, rng)
    assert_array_equal(pois / 0.5, np.round(pois / 0.5))
    assert np.all(rvs(2.0, np.full(1000, 1.0), 0.5, rng) > 0)
    assert np.all(rvs(1.5, np.full(1000, 1.0), 0.5, rng) >= 0)


def test_zero_mean_is_degenerate():
    rng = np.random.default_rng(0)
    assert_array_equal(rvs(1.5, np.zeros(5), 1.0, rng), 0.0)


def test_sample_is_deterministic():
    spec = TweedieSpec(1.5, 2.0, 0.3)
    a = sample(spec, np.random.default_rng(11), size=50)
    b = sample(spec, np.random.default_rng(11), size=50)
    assert_array_equal(a, b)


def test_sample_scalar():
    out = sample(TweedieSpec(2.0, 1.0, 0.1), np.random.default_rng(1))
    assert np.ndim(out) == 0 or np.size(out) == 1


def test_tilted_stable_acceptance_not_degenerate():
    # tiny mean and dispersion would make a single tilted draw hopeless
    rng = np.random.default_rng(5)
    x = tweedie._tilted_stable(2.5, np.full(2000, 0.5), np.full(2000, 0.01), rng)
    assert abs(x.mean() - 0.5) < 4 * np.sqrt(0.01 * 0.5**2.5 / 2000)
