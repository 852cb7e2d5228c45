import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tweediemix.covariance import AssociationParams, CorrelationStructure, k_matrix
from tweediemix.simulate import (
    SimConfig,
    cluster_rng,
    design_matrix,
    gen_cluster,
    gen_dataset,
    marginal_cv,
    simulate_clusters,
    preset_config,
)


def _lag_cov_check(M, target, lags):
    """Empirical cov(M_t, M_{t+h}) against target[h] within 4 standard errors."""
    n = M.shape[0]
    Mc = M - M.mean(axis=0)
    for h in lags:
        prod = (Mc[:, : M.shape[1] - h] * Mc[:, h:]).mean(axis=1)
        se = prod.std(ddof=1) / np.sqrt(n)
        assert abs(prod.mean() - target[h]) < 4 * se, (h, prod.mean(), target[h], se)


def test_marginal_cv_preset_rows():
    assert marginal_cv(preset_config("poisson")) == pytest.approx(0.497, abs=0.002)
    assert marginal_cv(preset_config("gamma")) == pytest.approx(0.579, abs=0.002)


def test_design_is_centred_trend():
    X = design_matrix(SimConfig(T=5))
    assert_allclose(X[:, 0], 1.0)
    assert_allclose(X[:, 1], [-0.5, -0.25, 0.0, 0.25, 0.5])


def test_custom_design_shape_checked():
    with pytest.raises(ValueError):
        design_matrix(SimConfig(T=5, covariate_design=np.ones((4, 2))))


def test_config_validation():
    with pytest.raises(ValueError, match="0 < r < 1"):
        SimConfig(r2=0.5)
    with pytest.raises(ValueError):
        SimConfig(I=1)
    with pytest.raises(KeyError):
        preset_config("lognormal")


def test_dataset_layout():
    data, latents = gen_dataset(preset_config("poisson"))
    assert len(data) == 15 and all(c.T == 30 for c in data)
    assert all(np.all(c.y == np.round(c.y)) for c in data)
    assert len(latents) == 15


def test_cluster_seed_is_order_free():
    cfg = preset_config("gamma", seed=9)
    data, _ = gen_dataset(cfg, replicate=3)
    alone, _ = gen_cluster(cfg, 7, cluster_rng(9, 0, 3, 7))
    assert_array_equal(alone.y, data[7].y)
    again, _ = gen_dataset(cfg, replicate=3)
    assert_array_equal(np.concatenate([c.y for c in again]), np.concatenate([c.y for c in data]))


@pytest.mark.parametrize(
    "structure,alpha,r1,r2",
    [(CorrelationStructure("ar1"), (0.5,), 2.0, 2.0), (CorrelationStructure("ar1"), (0.3,), 1.5, 3.0),
     (CorrelationStructure("ma", 2), (0.4, 0.3), 3.0, 1.5)],
)
def test_latent_moments(structure, alpha, r1, r2):
    rng = np.random.default_rng(101)
    n, T = 40_000, 5
    assoc = AssociationParams(0.05, 0.15, 0.085, alpha, 2.0)
    X = np.ones((n, T, 1))
    _, lat = simulate_clusters(X, [0.0], assoc, structure, r1, r2, 2.0, rng, resample_zero_cluster=False)
    a_plus = structure.alpha_plus(alpha)
    # independent noise terms: cov = delta * omega2 + sigma2 / a_plus**2
    z = lat.z_noise[:, -T:]
    _lag_cov_check(z, [0.15 + 0.05 / a_plus**2] + [0.05 / a_plus**2] * 4, range(4))
    K = k_matrix(structure, alpha, T)
    _lag_cov_check(lat.q, 0.15 * K[0] + 0.05, range(4))
    assert abs(lat.q.mean() - 1.0) < 4 * lat.q.mean(axis=1).std() / np.sqrt(n)


def test_no_latent_variation_gives_uncorrelated_residuals():
    cfg = SimConfig(assoc=AssociationParams(0.0, 0.0, 0.1, (0.5,), 2.0), I=400, T=20, seed=1)
    data, lat = gen_dataset(cfg)
    # exact up to the AR burn-in truncation
    assert all(np.allclose(l.q, 1.0, rtol=0, atol=1e-9) for l in lat)
    r = np.stack([c.y / np.exp(c.X @ np.array(cfg.beta)) - 1 for c in data])
    lag1 = np.corrcoef(r[:, :-1].ravel(), r[:, 1:].ravel())[0, 1]
    assert abs(lag1) < 4 / np.sqrt(r[:, 1:].size)


def test_zero_cluster_effects():
    assoc = AssociationParams(1.5, 0.15, 0.085, (0.5,), 2.0)
    kw = dict(r1=1.5, assoc=assoc, I=200, T=4, seed=2)
    _, lat = gen_dataset(SimConfig(**kw))
    assert all(l.z_cluster > 0 for l in lat)
    data, lat = gen_dataset(SimConfig(resample_zero_cluster=False, **kw))
    zero = [l.z_cluster == 0 for l in lat]
    assert any(zero)
    for c, z in zip(data, zero):
        if z:
            assert np.all(c.y == 0)


def test_batched_shapes():
    rng = np.random.default_rng(0)
    X = np.ones((3, 6, 1))
    y, lat = simulate_clusters(X, [0.2], AssociationParams(0.05, 0.1, 0.1, (0.4,)), CorrelationStructure("ar1"),
                               2.0, 2.0, 2.0, rng)
    assert y.shape == (3, 6) and lat.q.shape == (3, 6) and lat.z_cluster.shape == (3,)
    assert lat.z_noise.shape[1] >= 6
