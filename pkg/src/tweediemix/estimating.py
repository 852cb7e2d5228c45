"""Estimating functions for regression and association parameters.

The regression function is the quasi-score ``sum_i D_i' C_i^{-1} (y_i - mu_i)``
under the log link. Association parameters use Pearson estimating functions
``sum_i tr{W_in (r_i r_i' - C_i)}`` with weights ``W_in = C^{-1} dC/dgamma_n C^{-1}``.

Clusters of equal length are stacked and processed as one batch; every
quantity below is derived from a single Cholesky factorisation per cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import (
    AssociationParams,
    ModelSpec,
    build_cluster_cov,
    cov_d_beta,
    cov_d_gamma,
    k_matrix,
)

__all__ = [
    "ClusterData",
    "Theta",
    "Panel",
    "EEBlocks",
    "as_panel",
    "mean_and_gradient",
    "hall_weights",
    "psi_beta",
    "psi_gamma",
    "sensitivity_beta",
    "sensitivity_gamma",
    "sensitivity_gamma_beta",
    "ee_blocks",
]

_ETA_MAX = 700.0


@dataclass
class ClusterData:
    """Response vector, design matrix and observation times for one cluster."""

    y: np.ndarray
    X: np.ndarray
    times: np.ndarray | None = None
    cluster_id: object = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.X = X
        T = self.y.size
        if T < 1:
            raise ValueError(f"cluster {self.cluster_id!r} is empty")
        if X.shape[0] != T:
            raise ValueError(
                f"cluster {self.cluster_id!r}: X has {X.shape[0]} rows but y has {T} entries"
            )
        if self.times is None:
            self.times = np.arange(T)
        self.times = np.asarray(self.times).astype(np.int64).ravel()
        if self.times.size != T:
            raise ValueError(f"cluster {self.cluster_id!r}: times and y lengths differ")
        steps = np.diff(self.times)
        if np.any(steps != 1):
            bad = int(np.flatnonzero(steps != 1)[0])
            raise ValueError(
                f"cluster {self.cluster_id!r}: times must be contiguous integers; "
                f"gap between {self.times[bad]} and {self.times[bad + 1]}"
            )

    @property
    def T(self) -> int:
        return self.y.size


@dataclass
class Theta:
    """Regression coefficients and association parameters."""

    beta: np.ndarray
    assoc: AssociationParams

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).ravel()

    def vector(self, model: ModelSpec) -> np.ndarray:
        return np.concatenate([self.beta, model.gamma_vector(self.assoc)])

    def names(self, model: ModelSpec) -> list[str]:
        return [f"beta{j}" for j in range(self.beta.size)] + model.gamma_names

    def with_vector(self, model: ModelSpec, vec) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        p = self.beta.size
        return Theta(vec[:p].copy(), model.with_gamma(self.assoc, vec[p:]))


@dataclass
class _Group:
    index: np.ndarray  # positions in the panel's cluster order
    y: np.ndarray  # (B, T)
    X: np.ndarray  # (B, T, p)


class Panel:
    """Clusters stacked by length for batched evaluation.

    Cluster order is preserved for per-cluster outputs; the reduction order
    within each batch is fixed, so sums do not depend on execution details.
    """

    def __init__(self, clusters):
        self.clusters = list(clusters)
        if not self.clusters:
            raise ValueError("no clusters supplied")
        p = {c.X.shape[1] for c in self.clusters}
        if len(p) != 1:
            raise ValueError(f"clusters disagree on the number of covariates: {sorted(p)}")
        self.p = p.pop()
        lengths = np.array([c.T for c in self.clusters])
        self.groups = []
        for T in np.unique(lengths):
            idx = np.flatnonzero(lengths == T)
            self.groups.append(
                _Group(
                    idx,
                    np.stack([self.clusters[i].y for i in idx]),
                    np.stack([self.clusters[i].X for i in idx]),
                )
            )

    def __len__(self):
        return len(self.clusters)

    @property
    def n_obs(self) -> int:
        return sum(c.T for c in self.clusters)

    def cluster_label(self, pos: int):
        cid = self.clusters[pos].cluster_id
        return pos if cid is None else cid


def as_panel(data) -> Panel:
    if isinstance(data, Panel):
        return data
    if isinstance(data, ClusterData):
        return Panel([data])
    return Panel(data)


def mean_and_gradient(beta, cluster: ClusterData):
    """Marginal means ``exp(X beta)`` and ``D = diag(mu) X``."""
    beta = np.asarray(beta, dtype=float)
    mu = _mean(cluster.X, beta, [cluster.cluster_id])
    return mu, mu[:, None] * cluster.X


def _mean(X, beta, labels):
    eta = X @ beta
    if not np.all(np.isfinite(eta)) or np.any(eta > _ETA_MAX):
        flat = np.argwhere(~np.isfinite(eta) | (eta > _ETA_MAX))[0]
        where = f"cluster {labels[flat[0]]!r}, row {flat[-1]}" if eta.ndim == 2 else f"row {flat[-1]}"
        raise FloatingPointError(f"linear predictor overflows exp() at {where}")
    return np.exp(eta)


def hall_weights(C_inv, dC) -> np.ndarray:
    """Hall-Severini weights ``C^{-1} dC C^{-1}``."""
    C_inv = np.asarray(C_inv, dtype=float)
    return C_inv @ np.asarray(dC, dtype=float) @ C_inv


class _Terms:
    """Per-batch intermediates shared by all estimating-function blocks."""

    def __init__(self, theta: Theta, group: _Group, model: ModelSpec, panel: Panel):
        self.group = group
        assoc = theta.assoc
        self.assoc = assoc
        B, T, p = group.X.shape
        labels = [panel.cluster_label(i) for i in group.index]
        self.mu = _mean(group.X, theta.beta, labels)
        self.X = group.X
        self.D = self.mu[..., None] * group.X
        self.K = k_matrix(model.structure, assoc.alpha, T)
        self.C = build_cluster_cov(self.mu, assoc, self.K)
        try:
            L = np.linalg.cholesky(self.C)
        except np.linalg.LinAlgError:
            bad = _first_non_pd(self.C)
            raise np.linalg.LinAlgError(
                f"covariance matrix of cluster {labels[bad]!r} is not positive definite"
            ) from None
        Linv = np.linalg.solve(L, np.broadcast_to(np.eye(T), L.shape))
        self.Cinv = np.swapaxes(Linv, -1, -2) @ Linv
        self.r = group.y - self.mu
        self.u = np.einsum("bij,bj->bi", self.Cinv, self.r)
        self.H = self.Cinv @ self.D
        names = model.gamma_names
        self.dC = np.stack([cov_d_gamma(self.mu, assoc, model.structure, n) for n in names]) if names else np.zeros((0, B, T, T))
        self.A = self.Cinv[None] @ self.dC
        self._dC_beta = None

    @property
    def dmu(self):
        # (p, B, T): d mu / d beta_m
        return np.moveaxis(self.mu[..., None] * self.X, -1, 0)

    @property
    def dC_beta(self):
        if self._dC_beta is None:
            self._dC_beta = np.stack([cov_d_beta(self.mu, dm, self.assoc, self.K) for dm in self.dmu])
        return self._dC_beta


def _first_non_pd(C):
    for b in range(C.shape[0]):
        try:
            np.linalg.cholesky(C[b])
        except np.linalg.LinAlgError:
            return b
    return 0


def _terms(theta, data, model):
    panel = as_panel(data)
    if theta.beta.size != panel.p:
        raise ValueError(f"beta has {theta.beta.size} entries, design has {panel.p} columns")
    return panel, [_Terms(theta, g, model, panel) for g in panel.groups]


@dataclass
class EEBlocks:
    """Estimating functions, sensitivity blocks and per-cluster contributions."""

    psi_beta: np.ndarray
    psi_gamma: np.ndarray
    S_beta: np.ndarray
    S_gamma: np.ndarray | None = None
    S_gamma_beta: np.ndarray | None = None
    per_cluster_psi: np.ndarray = field(default=None, repr=False)

    @property
    def V_beta(self) -> np.ndarray:
        return -self.S_beta

    @property
    def p(self) -> int:
        return self.psi_beta.size

    @property
    def psi(self) -> np.ndarray:
        return np.concatenate([self.psi_beta, self.psi_gamma])


def _blocks_from_terms(panel, terms, n_gamma, *, gamma_sens=True, cross=True) -> EEBlocks:
    p = panel.p
    per = np.zeros((len(panel), p + n_gamma))
    S_beta = np.zeros((p, p))
    S_gamma = np.zeros((n_gamma, n_gamma)) if gamma_sens else None
    S_gb = np.zeros((n_gamma, p)) if cross else None
    for t in terms:
        per[t.group.index, :p] = np.einsum("btp,bt->bp", t.D, t.u)
        quad = np.einsum("bi,nbij,bj->nb", t.u, t.dC, t.u)
        trace = np.einsum("nbii->nb", t.A)
        per[t.group.index, p:] = (quad - trace).T
        S_beta -= np.einsum("btp,btq->pq", t.D, t.H)
        if gamma_sens:
            S_gamma -= np.einsum("nbij,mbji->nm", t.A, t.A)
        if cross:
            Bm = t.Cinv[None] @ t.dC_beta
            S_gb -= np.einsum("nbij,mbji->nm", t.A, Bm)
    psi = per.sum(axis=0)
    return EEBlocks(psi[:p], psi[p:], S_beta, S_gamma, S_gb, per)


def ee_blocks(theta: Theta, data, model: ModelSpec, *, gamma_sens=True, cross=True) -> EEBlocks:
    """All estimating-function blocks at ``theta``."""
    panel, terms = _terms(theta, data, model)
    return _blocks_from_terms(panel, terms, len(model.gamma_names), gamma_sens=gamma_sens, cross=cross)


def psi_beta(theta: Theta, data, model: ModelSpec) -> np.ndarray:
    """Regression estimating function ``sum_i D_i' C_i^{-1} (y_i - mu_i)``."""
    return ee_blocks(theta, data, model, gamma_sens=False, cross=False).psi_beta


def psi_gamma(theta: Theta, data, model: ModelSpec) -> np.ndarray:
    """Pearson estimating functions for the free association parameters."""
    return ee_blocks(theta, data, model, gamma_sens=False, cross=False).psi_gamma


def sensitivity_beta(theta: Theta, data, model: ModelSpec):
    """Return ``(S_beta, V_beta)`` with ``V_beta = -S_beta``."""
    S = ee_blocks(theta, data, model, gamma_sens=False, cross=False).S_beta
    return S, -S


def sensitivity_gamma(theta: Theta, data, model: ModelSpec) -> np.ndarray:
    return ee_blocks(theta, data, model, cross=False).S_gamma


def sensitivity_gamma_beta(theta: Theta, data, model: ModelSpec) -> np.ndarray:
    return ee_blocks(theta, data, model, gamma_sens=False).S_gamma_beta
