"""Sandwich covariance, Wald tests and confidence intervals.

The bread ``S_theta^{-1}`` is block lower-triangular because ``psi_beta`` is
insensitive to gamma, so the sandwich is assembled block by block rather than
by inverting the full sensitivity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .bias import corrected_blocks
from .estimating import EEBlocks

__all__ = ["SandwichResult", "empirical_variability", "sandwich", "wald"]

Z95 = stats.norm.ppf(0.975)


@dataclass
class SandwichResult:
    cov_theta: np.ndarray
    variant: str
    names: list
    estimates: np.ndarray
    se: np.ndarray
    wald_p: np.ndarray
    ci95: np.ndarray  # (k, 2)

    def table(self):
        import pandas as pd

        return pd.DataFrame(
            {
                "parameter": self.names,
                "estimate": self.estimates,
                "se": self.se,
                "p_value": self.wald_p,
                "ci_low": self.ci95[:, 0],
                "ci_high": self.ci95[:, 1],
            }
        )


def empirical_variability(per_cluster_psi, centered: bool = False) -> np.ndarray:
    """``sum_i psi_i psi_i'`` over per-cluster contributions.

    The uncentered form is the default; ``centered=True`` subtracts the
    contribution mean first.
    """
    psi = np.atleast_2d(np.asarray(per_cluster_psi, dtype=float))
    if centered:
        psi = psi - psi.mean(axis=0)
    return psi.T @ psi


def _blocks_of(source, bias_correction):
    # accepts a FitResult or an EEBlocks instance
    if isinstance(source, EEBlocks):
        return source
    use = bias_correction if bias_correction is not None else source.bias_correction
    return corrected_blocks(source.blocks, source.penalty if use else None)


def sandwich_cov(blocks: EEBlocks, variant: str = "empirical", V=None, centered: bool = False) -> np.ndarray:
    """Assemble ``S^{-1} V S^{-T}`` from its blocks.

    Parameters
    ----------
    blocks : EEBlocks
        Sensitivities of the system whose roots were found (already amended
        for bias correction where applicable) and per-cluster contributions.
    variant : {"empirical", "semi_empirical"}
        The semi-empirical form replaces the empirical ``V_beta`` by ``-S_beta``.
    V : ndarray, optional
        Variability matrix to use instead of the empirical one.
    """
    if variant not in ("empirical", "semi_empirical"):
        raise ValueError(f"unknown sandwich variant {variant!r}")
    p = blocks.p
    if V is None:
        V = empirical_variability(blocks.per_cluster_psi, centered)
    Vb, Vgb, Vg = V[:p, :p], V[p:, :p], V[p:, p:]
    Sb, Sg, Sgb = blocks.S_beta, blocks.S_gamma, blocks.S_gamma_beta
    try:
        Sb_inv = np.linalg.inv(Sb)
        Sg_inv = np.linalg.inv(Sg) if Sg.size else Sg
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("sensitivity block singular in sandwich assembly") from None
    G = Sgb @ Sb_inv  # S_gb S_b^{-1}
    if variant == "empirical":
        upper = Sb_inv @ Vb @ Sb_inv
        cross = Sg_inv @ (-G @ Vb + Vgb) @ Sb_inv
        L = G @ (Vb @ Sb_inv @ Sgb.T - Vgb.T) - Vgb @ Sb_inv @ Sgb.T
    else:
        upper = -Sb_inv
        cross = Sg_inv @ (Sgb + Vgb) @ Sb_inv
        L = -G @ (Sgb.T + Vgb.T) - Vgb @ Sb_inv @ Sgb.T
    lower = Sg_inv @ (L + Vg) @ Sg_inv
    J = np.block([[upper, cross.T], [cross, lower]])
    return 0.5 * (J + J.T)


def sandwich(source, variant: str = "empirical", *, bias_correction=None, centered: bool = False,
             nulls=None) -> SandwichResult:
    """Sandwich covariance of a fit with standard errors, Wald p-values and 95% intervals.

    ``source`` is a :class:`~tweediemix.solver.FitResult`. ``nulls`` maps
    parameter names to null values (default 0; ``r3`` defaults to 2).
    """
    blocks = _blocks_of(source, bias_correction)
    cov = sandwich_cov(blocks, variant, centered=centered)
    names = source.names
    est = source.estimates
    null = np.array([(nulls or {}).get(n, 2.0 if n == "r3" else 0.0) for n in names])
    _, p, ci = wald(est, cov, null)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return SandwichResult(cov, variant, names, est, se, p, ci)


def wald(theta_hat, cov_theta, null=None):
    """Two-sided Wald tests and 95% normal intervals.

    Returns
    -------
    z, p_values, ci95
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    cov = np.atleast_2d(np.asarray(cov_theta, dtype=float))
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    null = np.zeros_like(theta_hat) if null is None else np.broadcast_to(np.asarray(null, dtype=float), theta_hat.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (theta_hat - null) / se, np.nan)
    p = 2.0 * stats.norm.sf(np.abs(z))
    ci = np.column_stack([theta_hat - Z95 * se, theta_hat + Z95 * se])
    return z, p, ci
