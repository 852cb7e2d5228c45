"""Data generation from the three-level Tweedie hierarchy.

Per cluster::

    Z_i            ~ Tw_r1(1, sigma2)
    Z_it | Z_i = z ~ Tw_r2(z / a_plus, a_plus**r2 * omega2 * z**(1 - r2))
    Q_it           = sum_s alpha_s Z_{i,t-s}
    Y_it | Q       ~ Tw_r3(mu_it q_it, rho2 * q_it**(1 - r3))

with ``a_plus = sum_s alpha_s``. The infinite AR(1) filter is run over a
burn-in long enough that truncation error stays below 1e-10.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import lfilter

from . import tweedie
from .covariance import AssociationParams, CorrelationStructure, k_matrix
from .estimating import ClusterData

__all__ = [
    "PRESETS",
    "SimConfig",
    "LatentRecord",
    "preset_config",
    "design_matrix",
    "simulate_clusters",
    "gen_cluster",
    "gen_dataset",
    "cluster_rng",
    "marginal_cv",
]

# response model -> (r3, beta0, beta1, rho2, alpha); sigma2 = 0.05, omega2 = 0.15 throughout
PRESETS = {
    "poisson": (1.0, 4.0, 0.3, 1.0, 0.40),
    "compound_poisson": (1.5, 1.6, 0.3, 0.1175, 0.55),
    "gamma": (2.0, 1.6, 0.3, 0.0850, 0.50),
    "inverse_gaussian": (3.0, 1.6, 0.3, 0.0200, 0.40),
}

_TRUNCATION = 1e-10


@dataclass
class SimConfig:
    """Truth and layout for one simulation configuration."""

    r1: float = 2.0
    r2: float = 2.0
    r3: float = 2.0
    beta: tuple = (1.6, 0.3)
    assoc: AssociationParams = field(
        default_factory=lambda: AssociationParams(0.05, 0.15, 0.085, (0.5,), 2.0)
    )
    structure: CorrelationStructure = field(default_factory=CorrelationStructure)
    I: int = 15
    T: int = 30
    replicates: int = 1
    seed: int = 0
    covariate_design: object = "time_trend"
    resample_zero_cluster: bool = True
    name: str = ""

    def __post_init__(self):
        for label, r in (("r1", self.r1), ("r2", self.r2), ("r3", self.r3)):
            tweedie._check_power(r)
            if r < 1:
                raise ValueError(
                    f"{label}={r}: latent and response powers must be >= 1 "
                    "(Tweedie powers satisfy r = 0 or r >= 1, and the log-link hierarchy needs positive means)"
                )
        if self.I < 2 or self.T < 2:
            raise ValueError("need I >= 2 clusters of length T >= 2")
        self.beta = tuple(float(b) for b in self.beta)
        self.assoc = replace(self.assoc, r3=self.r3)
        self.structure.check_alpha(self.assoc.alpha)

    @property
    def label(self) -> str:
        return self.name or f"r1={self.r1:g},r2={self.r2:g},r3={self.r3:g}"


def preset_config(response: str = "gamma", **overrides) -> SimConfig:
    """A :class:`SimConfig` for one of the named response presets in :data:`PRESETS`."""
    if response not in PRESETS:
        raise KeyError(f"unknown response model {response!r}; choose from {sorted(PRESETS)}")
    r3, b0, b1, rho2, alpha = PRESETS[response]
    kw = dict(
        r3=r3,
        beta=(b0, b1),
        assoc=AssociationParams(0.05, 0.15, rho2, (alpha,), r3),
        name=response,
    )
    kw.update(overrides)
    return SimConfig(**kw)


def design_matrix(config: SimConfig) -> np.ndarray:
    """Covariates for one cluster: intercept plus a centred time trend."""
    if isinstance(config.covariate_design, str):
        if config.covariate_design != "time_trend":
            raise ValueError(f"unknown covariate design {config.covariate_design!r}")
        t = np.arange(config.T)
        return np.column_stack([np.ones(config.T), t / (config.T - 1) - 0.5])
    X = np.asarray(config.covariate_design, dtype=float)
    if X.shape != (config.T, len(config.beta)):
        raise ValueError(f"custom design must have shape {(config.T, len(config.beta))}")
    return X


def _filter_coefs(structure: CorrelationStructure, alpha):
    """(numerator, denominator, burn-in) for the latent linear filter."""
    if structure.kind == "ar1":
        a = alpha[0]
        burn = 0 if a == 0 else math.ceil(math.log(_TRUNCATION) / math.log(a))
        return [1.0], [1.0, -a], burn
    if structure.kind == "ma":
        return [1.0, *alpha], [1.0], structure.order
    return [1.0], [1.0], 0


@dataclass
class LatentRecord:
    z_cluster: np.ndarray
    z_noise: np.ndarray
    q: np.ndarray


def simulate_clusters(
    X,
    beta,
    assoc: AssociationParams,
    structure: CorrelationStructure,
    r1: float,
    r2: float,
    r3: float,
    rng: np.random.Generator,
    *,
    resample_zero_cluster: bool = True,
):
    """Draw a batch of clusters sharing one random stream.

    Parameters
    ----------
    X : array of shape (B, T, p)
        Covariates per cluster.

    Returns
    -------
    y : (B, T) responses
    latent : LatentRecord with arrays of shapes (B,), (B, T + burn-in), (B, T)
    """
    X = np.asarray(X, dtype=float)
    B, T, _ = X.shape
    mu = np.exp(X @ np.asarray(beta, dtype=float))
    alpha = structure.check_alpha(assoc.alpha)
    a_plus = structure.alpha_plus(alpha)
    num, den, burn = _filter_coefs(structure, alpha)

    if assoc.sigma2 > 0:
        z = tweedie.rvs(r1, np.ones(B), assoc.sigma2, rng)
        if resample_zero_cluster:
            while np.any(z == 0):
                zero = z == 0
                z[zero] = tweedie.rvs(r1, np.ones(zero.sum()), assoc.sigma2, rng)
    else:
        z = np.ones(B)

    width = T + burn
    noise_mean = np.repeat((z / a_plus)[:, None], width, axis=1)
    if assoc.omega2 > 0:
        with np.errstate(divide="ignore"):
            disp = a_plus**r2 * assoc.omega2 * z ** (1.0 - r2)
        disp = np.where(z > 0, disp, 1.0)
        zt = tweedie.rvs(r2, noise_mean, disp[:, None], rng)
    else:
        zt = noise_mean
    q = lfilter(num, den, zt, axis=1)[:, burn:]
    q = np.maximum(q, 0.0)

    with np.errstate(divide="ignore"):
        ydisp = assoc.rho2 * q ** (1.0 - r3)
    ydisp = np.where(q > 0, ydisp, 1.0)
    y = tweedie.rvs(r3, mu * q, ydisp, rng)
    return y, LatentRecord(z, zt, q)


def cluster_rng(seed: int, config_id: int, replicate: int, cluster: int) -> np.random.Generator:
    """Independent stream for one cluster, keyed on its position in the study."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(config_id, replicate, cluster)))


def gen_cluster(config: SimConfig, cluster_index: int, rng: np.random.Generator):
    """Simulate one cluster; returns ``(ClusterData, LatentRecord)``."""
    X = design_matrix(config)
    y, lat = simulate_clusters(
        X[None],
        config.beta,
        config.assoc,
        config.structure,
        config.r1,
        config.r2,
        config.r3,
        rng,
        resample_zero_cluster=config.resample_zero_cluster,
    )
    record = LatentRecord(lat.z_cluster[0], lat.z_noise[0], lat.q[0])
    return ClusterData(y[0], X, np.arange(config.T), cluster_id=cluster_index), record


def gen_dataset(config: SimConfig, replicate: int = 0, config_id: int = 0):
    """All ``config.I`` clusters of one replicate.

    Each cluster draws from :func:`cluster_rng`, so a cluster's data depend
    only on ``(seed, config_id, replicate, cluster)``.
    """
    clusters, latents = [], []
    for i in range(config.I):
        c, lat = gen_cluster(config, i, cluster_rng(config.seed, config_id, replicate, i))
        clusters.append(c)
        latents.append(lat)
    return clusters, latents


def marginal_cv(config: SimConfig, at_baseline: bool = True) -> float:
    """Closed-form coefficient of variation of the marginal response.

    ``CV**2 = sigma2 + omega2 K_tt + rho2 mu**(r3 - 2)``, evaluated at
    ``mu = exp(beta0)`` or, with ``at_baseline=False``, averaged over the
    design's time points.
    """
    a = config.assoc
    ktt = k_matrix(config.structure, a.alpha, 1)[0, 0]
    if at_baseline:
        mu = np.array([math.exp(config.beta[0])])
    else:
        mu = np.exp(design_matrix(config) @ np.asarray(config.beta))
    cv2 = a.sigma2 + a.omega2 * ktt + a.rho2 * mu ** (config.r3 - 2)
    return float(np.mean(np.sqrt(cv2)))
