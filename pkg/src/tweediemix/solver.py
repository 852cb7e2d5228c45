"""Chaser algorithm: alternating Newton-scoring steps for beta and gamma.

Each sweep updates ``beta* = beta - S_beta^{-1} psi_beta(beta, gamma)`` and then
``gamma* = gamma - S_gamma^{-1} psi_gamma(beta*, gamma)``. With bias
correction the corrected function and amended sensitivity replace their
uncorrected counterparts in the gamma step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .bias import PenaltyBlocks, corrected_blocks, evaluate
from .covariance import AssociationParams, ModelSpec
from .estimating import EEBlocks, Panel, Theta, as_panel, ee_blocks

__all__ = [
    "SolverConfig",
    "FitResult",
    "SolverError",
    "InitializationError",
    "beta_step",
    "gamma_step",
    "initialize",
    "fit",
]

log = logging.getLogger(__name__)


class SolverError(np.linalg.LinAlgError):
    """A sensitivity block could not be factorised during fitting."""


class InitializationError(ValueError):
    pass


@dataclass
class SolverConfig:
    """Iteration control for :func:`fit`.

    ``bounds`` optionally overrides the default box for named association
    parameters, e.g. ``{"alpha1": (0.0, 0.95)}``.
    """

    max_iter: int = 100
    tol: float = 1e-8
    step_halvings_max: int = 10
    bias_correction: bool = True
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class FitResult:
    theta_hat: Theta
    model: ModelSpec
    iterations: int
    converged: bool
    trace: list = field(repr=False)
    blocks: EEBlocks = field(repr=False)
    penalty: PenaltyBlocks | None = field(repr=False)
    bias_correction: bool = True

    @property
    def names(self) -> list[str]:
        return self.theta_hat.names(self.model)

    @property
    def estimates(self) -> np.ndarray:
        return self.theta_hat.vector(self.model)

    @property
    def corrected(self) -> EEBlocks:
        """Blocks of the system actually solved (bias-amended when enabled)."""
        return corrected_blocks(self.blocks, self.penalty if self.bias_correction else None)


def _solve(S, rhs, what, iteration=None):
    try:
        return np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        at = "" if iteration is None else f" at iteration {iteration}"
        raise SolverError(f"{what} is singular{at}") from None


def beta_step(theta: Theta, data, model: ModelSpec, *, iteration=None) -> np.ndarray:
    """One Newton-scoring update of the regression coefficients."""
    ee = ee_blocks(theta, data, model, gamma_sens=False, cross=False)
    return theta.beta - _solve(ee.S_beta, ee.psi_beta, "S_beta", iteration)


def _bounds(model, config):
    lo, hi = model.bounds()
    for j, n in enumerate(model.gamma_names):
        if n in config.bounds:
            lo[j], hi[j] = config.bounds[n]
    return lo, hi


def _gamma_update(theta, data, model, config, iteration=None):
    level = "gamma" if config.bias_correction else None
    _, ee, pen = evaluate(theta, data, model, level=level, cross=False)
    psi = ee.psi_gamma + (pen.b if pen is not None else 0.0)
    S = ee.S_gamma + (pen.db_dgamma if pen is not None else 0.0)
    N = psi.size
    info = {"halvings": 0, "clipped": [], "ridge": 0.0, "psi_norm": float(np.linalg.norm(np.concatenate([ee.psi_beta, psi])))}
    if N == 0:
        return np.zeros(0), info
    gamma = model.gamma_vector(theta.assoc)
    lo, hi = _bounds(model, config)
    # Coordinates pinned at a bound and pushing outward are held there, and the
    # Newton system is re-solved for the remaining ones (active-set step).
    pinned = np.zeros(N, dtype=bool)
    step = np.zeros(N)
    for _ in range(N):
        free = ~pinned
        Sf = S[np.ix_(free, free)]
        ridge_needed = False
        try:
            ridge_needed = np.linalg.cond(Sf) > 1e12
        except np.linalg.LinAlgError:
            ridge_needed = True
        if ridge_needed:
            info["ridge"] = 1e-10 * np.trace(Sf) / Sf.shape[0]
            Sf = Sf + info["ridge"] * np.eye(Sf.shape[0])
        step = np.zeros(N)
        step[free] = -_solve(Sf, psi[free], "S_gamma", iteration)
        push = free & (((gamma <= lo) & (step < 0)) | ((gamma >= hi) & (step > 0)))
        if not push.any():
            break
        pinned |= push
        if pinned.all():
            step = np.zeros(N)
            break
    new = gamma + step
    while np.any((new < lo) | (new > hi)) and info["halvings"] < config.step_halvings_max:
        step *= 0.5
        info["halvings"] += 1
        new = gamma + step
    outside = (new < lo) | (new > hi)
    info["clipped"] = [model.gamma_names[j] for j in np.flatnonzero(outside | pinned)]
    return np.clip(new, lo, hi), info


def gamma_step(theta: Theta, data, model: ModelSpec, config: SolverConfig | None = None) -> np.ndarray:
    """Modified Newton-scoring update of the free association parameters.

    ``theta`` should already carry this sweep's updated ``beta``.
    """
    gamma, _ = _gamma_update(theta, data, model, config or SolverConfig())
    return gamma


def _independence_beta(panel: Panel, r3: float, max_iter: int = 200) -> np.ndarray:
    X = np.concatenate([c.X for c in panel.clusters])
    y = np.concatenate([c.y for c in panel.clusters])
    ybar = y.mean()
    beta, *_ = np.linalg.lstsq(X, np.log(y + 0.1 * ybar), rcond=None)
    indep = ModelSpec.preset("independent", r3=r3)
    theta = Theta(beta, AssociationParams(0.0, 0.0, 1.0, (), r3))
    for _ in range(max_iter):
        new = beta_step(theta, panel, indep)
        step = new - theta.beta
        # guard against overflow from a wild first step
        for _ in range(30):
            if np.max(X @ (theta.beta + step)) < 700:
                break
            step *= 0.5
        theta = Theta(theta.beta + step, theta.assoc)
        if np.max(np.abs(step) / np.maximum(1.0, np.abs(theta.beta))) < 1e-12:
            break
    return theta.beta


def initialize(data, model: ModelSpec) -> Theta:
    """Starting values from an independence fit and Pearson moments."""
    panel = as_panel(data)
    y = np.concatenate([c.y for c in panel.clusters])
    if np.ptp(y) == 0:
        raise InitializationError("response has zero variance; cannot initialise")
    r3 = model.r3
    beta = _independence_beta(panel, r3)
    X = np.concatenate([c.X for c in panel.clusters])
    mu = np.exp(X @ beta)
    dof = max(y.size - beta.size, 1)
    rho2 = float(np.sum((y - mu) ** 2 / mu**r3) / dof)
    if not np.isfinite(rho2) or rho2 <= 0:
        raise InitializationError("Pearson dispersion is not positive")
    # sigma2 and omega2 live on the squared-CV scale
    cv2 = rho2 * float(np.mean(mu ** (r3 - 2)))
    start = max(cv2 / 10.0, 1e-4)
    alpha0 = 0.1 if model.structure.kind == "ar1" else 0.0
    assoc = AssociationParams(
        sigma2=start,
        omega2=start,
        rho2=rho2,
        alpha=(alpha0,) * model.structure.n_alpha,
        r3=r3,
    )
    return Theta(beta, model.apply_fixed(assoc))


def fit(data, model: ModelSpec, config: SolverConfig | None = None, start: Theta | None = None) -> FitResult:
    """Solve the estimating equations by the chaser algorithm.

    Parameters
    ----------
    data : list of ClusterData or Panel
    model : ModelSpec
    config : SolverConfig, optional
    start : Theta, optional
        Starting point; :func:`initialize` is used when omitted.

    Returns
    -------
    FitResult
        Blocks and penalty terms are evaluated at the final estimate.
        Non-convergence is flagged, not raised.
    """
    config = config or SolverConfig()
    panel = as_panel(data)
    theta = initialize(panel, model) if start is None else Theta(start.beta.copy(), model.apply_fixed(start.assoc))
    trace = []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        old = theta.vector(model)
        beta = beta_step(theta, panel, model, iteration=it)
        theta = Theta(beta, theta.assoc)
        gamma, info = _gamma_update(theta, panel, model, config, iteration=it)
        theta = Theta(beta, model.with_gamma(theta.assoc, gamma))
        new = theta.vector(model)
        change = float(np.max(np.abs(new - old) / np.maximum(1.0, np.abs(old))))
        trace.append({"iteration": it, "theta": new, "psi_norm": info["psi_norm"], "change": change, **info})
        if not np.all(np.isfinite(new)):
            log.warning("non-finite parameter values at iteration %d", it)
            break
        if change <= config.tol:
            converged = True
            break
    level = "full" if config.bias_correction else None
    _, ee, pen = evaluate(theta, panel, model, level=level)
    if not converged:
        log.info("chaser did not converge in %d iterations", it)
    return FitResult(theta, model, it, converged, trace, ee, pen, config.bias_correction)
