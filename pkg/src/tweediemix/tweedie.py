"""Tweedie exponential dispersion models: variance function and sampling.

A Tweedie variable ``Y ~ Tw_r(mu, sigma2)`` has ``E(Y) = mu`` and
``var(Y) = sigma2 * mu**r``. Supported powers are ``r = 0`` and ``r >= 1``;
no Tweedie law exists for ``0 < r < 1``.

All samplers take an explicit :class:`numpy.random.Generator`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TweedieSpec", "variance_function", "sample", "rvs", "zero_probability"]


def _check_power(power: float) -> None:
    if not np.isfinite(power) or power < 0 or 0 < power < 1:
        raise ValueError(
            f"invalid Tweedie power {power!r}: r must satisfy r = 0 or r >= 1 "
            "(no Tweedie law exists for 0 < r < 1)"
        )


@dataclass(frozen=True)
class TweedieSpec:
    """One Tweedie law ``Tw_power(mean, dispersion)``."""

    power: float
    mean: float
    dispersion: float

    def __post_init__(self):
        _check_power(self.power)
        if self.dispersion <= 0:
            raise ValueError(f"dispersion must be positive, got {self.dispersion}")
        if self.power >= 1 and self.mean <= 0:
            raise ValueError(f"mean must be positive for power >= 1, got {self.mean}")

    @property
    def variance(self) -> float:
        if self.power == 0:
            return self.dispersion
        return self.dispersion * self.mean**self.power


def variance_function(mu, power: float):
    """Tweedie variance function ``mu**power`` for positive ``mu``."""
    mu_arr = np.asarray(mu, dtype=float)
    if np.any(mu_arr <= 0):
        raise ValueError("variance_function requires mu > 0")
    out = mu_arr**power
    return float(out) if out.ndim == 0 else out


def zero_probability(mean, dispersion, power: float):
    """``P(Y = 0)`` for the compound Poisson range ``1 < power < 2``."""
    if not 1 < power < 2:
        raise ValueError("zero mass is only defined here for 1 < power < 2")
    lam = np.asarray(mean, dtype=float) ** (2 - power) / (np.asarray(dispersion) * (2 - power))
    return np.exp(-lam)


def sample(spec: TweedieSpec, rng: np.random.Generator, size=None):
    """Draw from ``Tw_r(mu, sigma2)``.

    Parameters
    ----------
    spec : TweedieSpec
    rng : numpy.random.Generator
    size : int or tuple, optional
        Output shape; a scalar float is returned when omitted.
    """
    shape = () if size is None else size
    mean = np.full(shape, spec.mean, dtype=float)
    out = rvs(spec.power, mean, spec.dispersion, rng)
    return float(out) if size is None else out


def rvs(power: float, mean, dispersion, rng: np.random.Generator) -> np.ndarray:
    """Vectorised Tweedie sampler over arrays of means and dispersions.

    ``mean`` and ``dispersion`` broadcast against each other. For
    ``power >= 1`` a zero mean is accepted and yields a degenerate draw of 0,
    which the hierarchical simulator needs when a latent level collapses.

    Parameters
    ----------
    power : float
        Tweedie power ``r``; ``0`` or ``>= 1``.
    mean, dispersion : array_like
        Means (``>= 0`` for ``power >= 1``) and positive dispersions.
    rng : numpy.random.Generator

    Returns
    -------
    ndarray
        Draws with the broadcast shape of ``mean`` and ``dispersion``.
    """
    _check_power(power)
    mean, dispersion = np.broadcast_arrays(
        np.asarray(mean, dtype=float), np.asarray(dispersion, dtype=float)
    )
    if np.any(dispersion <= 0):
        raise ValueError("dispersion must be positive")
    if power == 0:
        return mean + np.sqrt(dispersion) * rng.standard_normal(mean.shape)
    if np.any(mean < 0):
        raise ValueError("mean must be non-negative for power >= 1")

    out = np.zeros(mean.shape)
    live = mean > 0
    mu = mean[live]
    s2 = dispersion[live]
    if power == 1:
        # scaled Poisson: s2 * Poisson(mu / s2) has mean mu, variance s2 * mu
        draws = s2 * rng.poisson(mu / s2)
    elif power < 2:
        draws = _compound_poisson(power, mu, s2, rng)
    elif power == 2:
        draws = rng.gamma(1.0 / s2, s2 * mu)
    elif power == 3:
        draws = rng.wald(mu, 1.0 / s2)  # var = mean**3 / scale
    else:
        draws = _tilted_stable(power, mu, s2, rng)
    out[live] = draws
    return out


def _compound_poisson(power, mu, s2, rng):
    lam = mu ** (2 - power) / (s2 * (2 - power))
    shape = (2 - power) / (power - 1)
    scale = s2 * (power - 1) * mu ** (power - 1)
    n = rng.poisson(lam)
    draws = np.zeros(mu.shape)
    pos = n > 0
    draws[pos] = rng.gamma(n[pos] * shape, scale[pos])
    return draws


def _positive_stable(a, size, rng):
    """Kanter's representation of a positive stable law with Laplace exp(-s**a)."""
    u = rng.uniform(0.0, np.pi, size)
    e = rng.standard_exponential(size)
    zolo = (
        np.sin(a * u) ** (a / (1 - a))
        * np.sin((1 - a) * u)
        / np.sin(u) ** (1 / (1 - a))
    )
    return (zolo / e) ** ((1 - a) / a)


def _tilted_stable(power, mu, s2, rng):
    """Exponentially tilted positive stable sampler for ``power > 2``.

    On the additive scale ``Z = Y / s2`` the law is a tilted stable variate.
    Splitting it into ``n`` iid pieces keeps each piece's rejection rate at
    ``exp(-total / n) >= 1/e``.
    """
    a = (power - 2) / (power - 1)
    lam = 1.0 / s2
    theta = mu ** (1 - power) / (1 - power)
    total = mu ** (2 - power) / (s2 * (power - 2))
    n = np.maximum(1, np.ceil(total)).astype(np.int64)

    owner = np.repeat(np.arange(mu.size), n)
    piece_lam = (lam / n)[owner]
    gscale = (piece_lam * ((1 - a) / a) * (1 - a) ** (-a)) ** (1 / a)
    tilt = theta[owner]

    pieces = np.empty(owner.size)
    pending = np.arange(owner.size)
    while pending.size:
        s = gscale[pending] * _positive_stable(a, pending.size, rng)
        ok = rng.uniform(size=pending.size) < np.exp(tilt[pending] * s)
        pieces[pending[ok]] = s[ok]
        pending = pending[~ok]

    z = np.bincount(owner, weights=pieces, minlength=mu.size)
    return z / lam

