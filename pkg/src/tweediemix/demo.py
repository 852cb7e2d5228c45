"""Seeded synthetic band-width data shaped like a daily otolith series.

Three spawning seasons, several fish per season and one width per daily
band. The log-mean is quadratic in band number with season-specific
shifts, the latent process is AR(1) on the daily scale and widths are
gamma distributed. Series lengths differ between fish, so the usual
preprocessing (drop the first bands, keep every 8th, truncate to the
shortest series per season) has something to do.
"""

from __future__ import annotations

import numpy as np
import pandas as pd

from .covariance import AssociationParams, CorrelationStructure
from .simulate import cluster_rng, simulate_clusters

__all__ = ["DEMO_CONFIG", "demo_frame"]

SEASONS = ("autumn", "winter", "spring")

# true coefficients of [1, band, band^2, winter, spring, band:spring]
_BETA = np.array([1.0, 0.8, -0.25, -0.1, 0.3, -0.2])
_ASSOC = AssociationParams(sigma2=0.04, omega2=0.01, rho2=0.02, alpha=(0.97,), r3=2.0)

DEMO_CONFIG = {
    "data": {
        "cluster": "fish",
        "time": "band_index",
        "response": "width",
        "group": "season",
        "filters": {"drop_first": 10, "every": 8, "truncate": True},
    },
    "model": {
        "structure": "ar1",
        "r3": 2.0,
        "r3_free": False,
        "formula": ["1", "band", "band^2", "winter", "spring", "band:spring"],
    },
    "solver": {"max_iter": 100, "tol": 1e-8},
    "inference": {"sandwich": "empirical"},
}


def _design(band, season):
    return np.column_stack(
        [
            np.ones_like(band),
            band,
            band**2,
            np.full_like(band, season == "winter"),
            np.full_like(band, season == "spring"),
            band * (season == "spring"),
        ]
    )


def demo_frame(seed: int = 2007, fish_per_season: int = 10, min_days: int = 150, max_days: int = 220) -> pd.DataFrame:
    """Long-format daily band widths for ``3 * fish_per_season`` fish.

    Columns: ``fish, season, band_index, band, winter, spring, width`` where
    ``band = band_index / 100``.
    """
    structure = CorrelationStructure("ar1")
    length_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    rows = []
    fish = 0
    for season in SEASONS:
        for _ in range(fish_per_season):
            n = int(length_rng.integers(min_days, max_days + 1))
            idx = np.arange(n)
            band = idx / 100.0
            X = _design(band, season)
            y, _ = simulate_clusters(
                X[None], _BETA, _ASSOC, structure, 2.0, 2.0, 2.0, cluster_rng(seed, 0, 0, fish)
            )
            rows.append(
                pd.DataFrame(
                    {
                        "fish": f"{season[0]}{fish:02d}",
                        "season": season,
                        "band_index": idx,
                        "band": band,
                        "winter": X[:, 3],
                        "spring": X[:, 4],
                        "width": y[0],
                    }
                )
            )
            fish += 1
    return pd.concat(rows, ignore_index=True)
