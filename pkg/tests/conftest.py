import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tweediemix.covariance import AssociationParams, ModelSpec
from tweediemix.estimating import Theta
from tweediemix.simulate import gen_dataset, preset_config

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

def pytest_terminal_summary(terminalreporter):
    from _acceptance import LINES

    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(LINES):
        terminalreporter.write_line(LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def gamma_data():
    """One simulated dataset at the gamma-response truth (15 clusters of length 30)."""
    cfg = preset_config("gamma", seed=4242)
    data, _ = gen_dataset(cfg)
    return cfg, data


@pytest.fixture(scope="session")
def gamma_truth(gamma_data):
    cfg, _ = gamma_data
    return Theta(np.array(cfg.beta), cfg.assoc), ModelSpec(cfg.structure, r3=cfg.r3)


@pytest.fixture(scope="session")
def ragged_data():
    """Clusters of unequal length with an MA(2) latent process and free r3."""
    rng = np.random.default_rng(7)
    from tweediemix.estimating import ClusterData

    out = []
    for i, T in enumerate([5, 8, 8, 3, 6, 5, 1]):
        t = np.arange(T)
        X = np.column_stack([np.ones(T), np.cos(t + i), rng.normal(size=T) * 0.3])
        mu = np.exp(X @ [0.5, 0.2, -0.3])
        y = rng.gamma(4.0, mu / 4.0)
        out.append(ClusterData(y, X, t, cluster_id=f"c{i}"))
    model = ModelSpec.preset("ma", order=2, r3=1.7, r3_free=True)
    theta = Theta(np.array([0.4, 0.1, -0.2]), AssociationParams(0.08, 0.1, 0.2, (0.3, 0.2), 1.7))
    return out, model, theta
