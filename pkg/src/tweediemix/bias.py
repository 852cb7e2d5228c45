"""Bias-corrected Pearson estimating functions.

The correction adds ``b_n = tr{(sum_i D_i' W_in D_i) J^{-1}}`` to each
association estimating function, where ``J = sum_i D_i' C_i^{-1} D_i`` is the
Godambe information for the regression parameters. Equivalently
``b_n = d log|J^{-1}| / d gamma_n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import ModelSpec, cov_d2_gamma, cov_d_gamma_beta
from .estimating import EEBlocks, Theta, _blocks_from_terms, _terms

__all__ = [
    "PenaltyBlocks",
    "godambe_beta",
    "penalty",
    "corrected_psi_gamma",
    "j_beta_derivatives",
    "penalty_derivatives",
    "penalty_blocks",
    "evaluate",
]


@dataclass
class PenaltyBlocks:
    """Bias penalty, its derivatives, and the derivatives of ``J_beta``.

    ``J_gamma[n]``, ``J_beta_d[m]``, ``J_gamma_gamma[n, m]`` and
    ``J_gamma_beta[n, m]`` hold the first and second derivatives of ``J_beta``.
    Entries not requested at evaluation time are ``None``.
    """

    b: np.ndarray
    J_beta: np.ndarray
    per_cluster_b: np.ndarray = field(repr=False)
    J_gamma: np.ndarray = field(repr=False)
    db_dgamma: np.ndarray | None = None
    db_dbeta: np.ndarray | None = None
    J_gamma_gamma: np.ndarray | None = field(default=None, repr=False)
    J_beta_d: np.ndarray | None = field(default=None, repr=False)
    J_gamma_beta: np.ndarray | None = field(default=None, repr=False)


def _sym(a):
    return a + np.swapaxes(a, -1, -2)


def penalty_blocks(panel, terms, model: ModelSpec, level: str = "full") -> PenaltyBlocks:
    """Assemble penalty quantities from shared per-batch terms.

    ``level`` is ``"b"`` (penalty only), ``"gamma"`` (adds gamma derivatives)
    or ``"full"`` (adds beta derivatives too).
    """
    p = panel.p
    names = model.gamma_names
    N = len(names)
    J = np.zeros((p, p))
    for t in terms:
        J += np.einsum("btp,btq->pq", t.D, t.H)
    try:
        Jinv = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("J_beta is singular; check the design matrix rank") from None
    Jinv = 0.5 * (Jinv + Jinv.T)

    per_b = np.zeros((len(panel), N))
    J_g = np.zeros((N, p, p))
    for t in terms:
        t.E = t.dC @ t.H[None]  # dC_n H
        t.P = t.Cinv[None] @ t.E  # C^{-1} dC_n H = W_n D
        dwd = np.einsum("btp,nbtq->nbpq", t.H, t.E)  # D' W_n D per cluster
        per_b[t.group.index] = np.einsum("nbpq,qp->bn", dwd, Jinv)
        J_g -= dwd.sum(axis=1)
    b = per_b.sum(axis=0)
    out = PenaltyBlocks(b=b, J_beta=J, per_cluster_b=per_b, J_gamma=J_g)
    if level == "b":
        return out

    JgJi = J_g @ Jinv  # (N, p, p)
    J_gg = np.zeros((N, N, p, p))
    for t in terms:
        Q = np.einsum("mbtp,nbtq->mnpq", t.E, t.P)
        J_gg += _sym(Q)
        for n in range(N):
            for m in range(n, N):
                d2 = cov_d2_gamma(t.mu, t.assoc, model.structure, names[n], names[m])
                if d2 is None:
                    continue
                hch = np.einsum("btp,bts,bsq->pq", t.H, d2, t.H)
                J_gg[n, m] -= hch
                if m != n:
                    J_gg[m, n] -= hch
    out.J_gamma_gamma = J_gg
    out.db_dgamma = np.einsum("npq,mqp->nm", JgJi, JgJi) - np.einsum("nmpq,qp->nm", J_gg, Jinv)
    if level == "gamma":
        return out

    J_b = np.zeros((p, p, p))
    J_gb = np.zeros((N, p, p, p))
    for t in terms:
        Dp = t.dmu[..., None] * t.X[None]  # (p, B, T, p): d D / d beta_m
        dCb = t.dC_beta  # (p, B, T, T)
        DpH = np.einsum("mbtp,btq->mpq", Dp, t.H)
        HCH = np.einsum("btp,mbts,bsq->mpq", t.H, dCb, t.H)
        J_b += _sym(DpH) - HCH
        DpP = np.einsum("mbtp,nbtq->nmpq", Dp, t.P)
        HCP = np.einsum("btp,mbts,nbsq->nmpq", t.H, dCb, t.P)
        cgb = np.stack(
            [
                np.stack([cov_d_gamma_beta(t.mu, dm, t.assoc, model.structure, n) for dm in t.dmu])
                for n in names
            ]
        ) if N else np.zeros((0, p) + t.C.shape)
        HCgbH = np.einsum("btp,nmbts,bsq->nmpq", t.H, cgb, t.H)
        J_gb -= _sym(DpP) - _sym(HCP) + HCgbH
    out.J_beta_d = J_b
    out.J_gamma_beta = J_gb
    JbJi = J_b @ Jinv
    out.db_dbeta = np.einsum("npq,mqp->nm", JgJi, JbJi) - np.einsum("nmpq,qp->nm", J_gb, Jinv)
    return out


def evaluate(theta: Theta, data, model: ModelSpec, *, level: str = "full", cross: bool = True):
    """Estimating-function blocks and penalty blocks from one factorisation pass.

    Returns
    -------
    (panel, EEBlocks, PenaltyBlocks or None)
        ``level=None`` skips the penalty.
    """
    panel, terms = _terms(theta, data, model)
    ee = _blocks_from_terms(panel, terms, len(model.gamma_names), cross=cross)
    pen = penalty_blocks(panel, terms, model, level) if level else None
    return panel, ee, pen


def godambe_beta(theta: Theta, data, model: ModelSpec) -> np.ndarray:
    """``J_beta = sum_i D_i' C_i^{-1} D_i``."""
    panel, terms = _terms(theta, data, model)
    J = np.zeros((panel.p, panel.p))
    for t in terms:
        J += np.einsum("btp,btq->pq", t.D, t.H)
    return J


def penalty(theta: Theta, data, model: ModelSpec) -> np.ndarray:
    """Bias penalty vector ``b`` over the free association parameters."""
    _, _, pen = evaluate(theta, data, model, level="b", cross=False)
    return pen.b


def corrected_psi_gamma(theta: Theta, data, model: ModelSpec) -> np.ndarray:
    """Bias-corrected Pearson estimating functions ``psi_gamma + b``."""
    _, ee, pen = evaluate(theta, data, model, level="b", cross=False)
    return ee.psi_gamma + pen.b


def j_beta_derivatives(theta: Theta, data, model: ModelSpec, which) -> np.ndarray:
    """One derivative of ``J_beta``.

    ``which`` is one of ``("gamma", n)``, ``("beta", m)``,
    ``("gamma_gamma", n, m)`` or ``("gamma_beta", n, m)``; ``n, m`` index
    the free association parameters (names accepted) or the coefficients.
    """
    kind, *idx = which
    names = model.gamma_names
    idx = [names.index(i) if isinstance(i, str) else int(i) for i in idx]
    _, _, pen = evaluate(theta, data, model, level="full")
    table = {
        "gamma": (pen.J_gamma, 1),
        "beta": (pen.J_beta_d, 1),
        "gamma_gamma": (pen.J_gamma_gamma, 2),
        "gamma_beta": (pen.J_gamma_beta, 2),
    }
    if kind not in table or len(idx) != table[kind][1]:
        raise ValueError(f"invalid derivative selector {which!r}")
    return table[kind][0][tuple(idx)]


def penalty_derivatives(theta: Theta, data, model: ModelSpec):
    """Return ``(db/dgamma, db/dbeta)``."""
    _, _, pen = evaluate(theta, data, model, level="full")
    return pen.db_dgamma, pen.db_dbeta


def corrected_blocks(ee: EEBlocks, pen: PenaltyBlocks | None) -> EEBlocks:
    """Blocks of the corrected system: psi_gamma + b, S amended by the penalty derivatives."""
    if pen is None:
        return ee
    p = ee.p
    per = ee.per_cluster_psi.copy()
    per[:, p:] += pen.per_cluster_b
    return EEBlocks(
        psi_beta=ee.psi_beta,
        psi_gamma=ee.psi_gamma + pen.b,
        S_beta=ee.S_beta,
        S_gamma=None if ee.S_gamma is None or pen.db_dgamma is None else ee.S_gamma + pen.db_dgamma,
        S_gamma_beta=None if ee.S_gamma_beta is None or pen.db_dbeta is None else ee.S_gamma_beta + pen.db_dbeta,
        per_cluster_psi=per,
    )
