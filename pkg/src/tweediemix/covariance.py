"""Latent correlation matrices and the within-cluster covariance model.

The marginal covariance of one cluster's response vector is::

    C = sigma2 * mu mu' + omega2 * diag(mu) K(alpha) diag(mu) + rho2 * diag(mu**r3)

where ``K(alpha)`` has entries ``sum_s alpha_s alpha_{s+|t-t'|}`` (``alpha_0 = 1``)
for the latent linear filter. All matrix functions accept ``mu`` with leading
batch dimensions, ``(..., T)``, and return ``(..., T, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

__all__ = [
    "CorrelationStructure",
    "AssociationParams",
    "ModelSpec",
    "k_matrix",
    "k_matrix_d1",
    "k_matrix_d2",
    "build_cluster_cov",
    "cov_d_gamma",
    "cov_d2_gamma",
    "cov_d_beta",
    "cov_d_gamma_beta",
    "blup_predict",
]

KINDS = ("independent", "exchangeable_glmm", "ma", "ar1")


@dataclass(frozen=True)
class CorrelationStructure:
    """Latent process filter: ``independent``, ``exchangeable_glmm``, ``ma`` (order q) or ``ar1``."""

    kind: str = "ar1"
    order: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown correlation structure {self.kind!r}; expected one of {KINDS}")
        if self.kind == "ma" and self.order < 1:
            raise ValueError("ma(q) requires q >= 1")
        if self.kind == "ar1" and self.order != 1:
            raise ValueError("ar1 has order 1")
        if self.kind in ("independent", "exchangeable_glmm") and self.order != 0:
            object.__setattr__(self, "order", 0)

    @property
    def n_alpha(self) -> int:
        return {"ar1": 1, "ma": self.order}.get(self.kind, 0)

    def alpha_plus(self, alpha) -> float:
        """Filter sum ``sum_s alpha_s`` including ``alpha_0 = 1``."""
        alpha = np.asarray(alpha, dtype=float)
        if self.kind == "ar1":
            return 1.0 / (1.0 - alpha[0])
        return 1.0 + float(np.sum(alpha))

    def check_alpha(self, alpha) -> tuple[float, ...]:
        alpha = tuple(float(a) for a in np.atleast_1d(np.asarray(alpha, dtype=float)))
        if len(alpha) != self.n_alpha:
            raise ValueError(f"{self.kind} expects {self.n_alpha} filter parameter(s), got {len(alpha)}")
        for a in alpha:
            if not 0.0 <= a < 1.0:
                raise ValueError(f"filter parameter {a} outside [0, 1)")
        return alpha


@dataclass(frozen=True)
class AssociationParams:
    """Dispersion components, filter parameters and response power."""

    sigma2: float
    omega2: float
    rho2: float
    alpha: tuple[float, ...] = ()
    r3: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in np.atleast_1d(self.alpha)))
        if self.sigma2 < 0 or self.omega2 < 0:
            raise ValueError("sigma2 and omega2 must be non-negative")
        if self.rho2 <= 0:
            raise ValueError("rho2 must be positive")

    def get(self, name: str) -> float:
        if name.startswith("alpha"):
            return self.alpha[int(name[5:]) - 1]
        return getattr(self, name)

    def with_values(self, values: dict[str, float]) -> "AssociationParams":
        alpha = list(self.alpha)
        kw = {}
        for name, v in values.items():
            if name.startswith("alpha"):
                alpha[int(name[5:]) - 1] = float(v)
            else:
                kw[name] = float(v)
        return replace(self, alpha=tuple(alpha), **kw)


_BOUNDS = {
    "sigma2": (0.0, np.inf),
    "omega2": (0.0, np.inf),
    "rho2": (1e-10, np.inf),
    "r3": (1.01, 5.0),
}


@dataclass
class ModelSpec:
    """Covariance structure plus which association parameters are estimated.

    Parameters
    ----------
    structure : CorrelationStructure
    r3 : float
        Response power; the starting value when ``r3_free``.
    r3_free : bool
        Estimate ``r3`` as the last association parameter.
    fixed : dict
        Association parameters held at a given value, e.g. ``{"sigma2": 0.0}``.
    """

    structure: CorrelationStructure = field(default_factory=CorrelationStructure)
    r3: float = 2.0
    r3_free: bool = False
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.fixed = dict(self.fixed)
        if self.structure.kind == "independent":
            self.fixed.setdefault("sigma2", 0.0)
            self.fixed.setdefault("omega2", 0.0)
        elif self.structure.kind == "exchangeable_glmm":
            self.fixed.setdefault("omega2", 0.0)
        # filter parameters are unidentified without latent process variance
        if self.fixed.get("omega2", None) == 0.0:
            for k in range(1, self.structure.n_alpha + 1):
                self.fixed.setdefault(f"alpha{k}", 0.0)
        unknown = set(self.fixed) - set(self.full_names)
        if unknown:
            raise ValueError(f"unknown association parameter(s) {sorted(unknown)}")
        if self.r3_free and "r3" in self.fixed:
            raise ValueError("r3 cannot be both free and fixed")

    @classmethod
    def preset(cls, name: str, order: int = 1, **kw) -> "ModelSpec":
        """Named restriction preset: ``independent``, ``exchangeable_glmm``, ``ma`` or ``ar1``."""
        structure = CorrelationStructure(name, order if name == "ma" else (1 if name == "ar1" else 0))
        return cls(structure=structure, **kw)

    @property
    def full_names(self) -> list[str]:
        m = self.structure.n_alpha
        return ["sigma2", "omega2", "rho2"] + [f"alpha{k}" for k in range(1, m + 1)] + ["r3"]

    @property
    def gamma_names(self) -> list[str]:
        return [
            n
            for n in self.full_names
            if n not in self.fixed and (n != "r3" or self.r3_free)
        ]

    def gamma_vector(self, assoc: AssociationParams) -> np.ndarray:
        return np.array([assoc.get(n) for n in self.gamma_names])

    def with_gamma(self, assoc: AssociationParams, gamma) -> AssociationParams:
        return assoc.with_values(dict(zip(self.gamma_names, np.asarray(gamma, dtype=float))))

    def apply_fixed(self, assoc: AssociationParams) -> AssociationParams:
        vals = dict(self.fixed)
        if not self.r3_free:
            vals.setdefault("r3", self.r3)
        return assoc.with_values(vals)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = [], []
        for n in self.gamma_names:
            a, b = _BOUNDS.get(n, (0.0, 0.999))
            lo.append(a)
            hi.append(b)
        return np.array(lo), np.array(hi)

    def full_index(self, name) -> int:
        names = self.full_names
        if isinstance(name, str):
            return names.index(name)
        if not 0 <= int(name) < len(names):
            raise IndexError(f"association index {name} out of range for {names}")
        return int(name)


def _as_structure(structure) -> CorrelationStructure:
    if isinstance(structure, CorrelationStructure):
        return structure
    if isinstance(structure, tuple):
        return CorrelationStructure(*structure)
    return CorrelationStructure(structure, 1 if structure == "ar1" else 0)


def _lags(T: int) -> np.ndarray:
    t = np.arange(T)
    return np.abs(t[:, None] - t[None, :])


def _ma_coefs(alpha) -> np.ndarray:
    return np.concatenate([[1.0], np.asarray(alpha, dtype=float)])


def _spow(a: float, k: np.ndarray) -> np.ndarray:
    # a**k with 0 for negative k, and 0**0 = 1
    k = np.asarray(k)
    out = np.zeros(k.shape)
    ok = k >= 0
    out[ok] = float(a) ** k[ok]
    return out


@lru_cache(maxsize=256)
def _k_cached(structure: CorrelationStructure, alpha: tuple, T: int) -> np.ndarray:
    h = _lags(T)
    if structure.kind in ("independent", "exchangeable_glmm"):
        K = np.eye(T)
    elif structure.kind == "ar1":
        a = alpha[0]
        K = _spow(a, h) / (1.0 - a * a)
    else:
        c = _ma_coefs(alpha)
        q = structure.order
        acov = np.array([c[: q + 1 - j] @ c[j:] if j <= q else 0.0 for j in range(T)])
        K = acov[h]
    K.setflags(write=False)
    return K


def k_matrix(structure, alpha, T: int) -> np.ndarray:
    """Latent process correlation matrix ``K(alpha)`` of size ``T x T``.

    Results are cached per ``(structure, alpha, T)`` and returned read-only.
    """
    structure = _as_structure(structure)
    if T < 1:
        raise ValueError("T must be >= 1")
    alpha = structure.check_alpha(alpha)
    return _k_cached(structure, alpha, int(T))


def k_matrix_d1(structure, alpha, T: int, k: int) -> np.ndarray:
    """``dK/d alpha_k`` where ``k`` is a 0-based index into ``alpha``."""
    structure = _as_structure(structure)
    alpha = structure.check_alpha(alpha)
    if not 0 <= k < structure.n_alpha:
        raise IndexError(f"filter index {k} out of range for {structure.kind}")
    h = _lags(T)
    if structure.kind == "ar1":
        a = alpha[0]
        num = (2 - h) * _spow(a, h + 1) + h * _spow(a, h - 1)
        return num / (1 - a * a) ** 2
    c = _ma_coefs(alpha)
    q = structure.order
    j = k + 1
    up = np.where(j <= q - h, c[np.clip(j + h, 0, q)], 0.0)
    down = np.where(j >= h, c[np.clip(j - h, 0, q)], 0.0)
    return up + down


def k_matrix_d2(structure, alpha, T: int, k: int, m: int) -> np.ndarray:
    """``d2K / d alpha_k d alpha_m`` (0-based indices into ``alpha``)."""
    structure = _as_structure(structure)
    alpha = structure.check_alpha(alpha)
    n = structure.n_alpha
    if not (0 <= k < n and 0 <= m < n):
        raise IndexError(f"filter indices ({k}, {m}) out of range for {structure.kind}")
    h = _lags(T)
    if structure.kind == "ar1":
        a = alpha[0]
        num = (
            (h * h - 5 * h + 6) * _spow(a, h + 2)
            + (-2 * h * h + 6 * h + 2) * _spow(a, h)
            + (h - 1) * h * _spow(a, h - 2)
        )
        return num / (1 - a * a) ** 3
    return (h == 0) * float(k == m) + (h == abs(k - m)).astype(float)


def _outer(mu):
    return mu[..., :, None] * mu[..., None, :]


def _diag(v):
    return v[..., :, None] * np.eye(v.shape[-1])


def build_cluster_cov(mu, assoc: AssociationParams, K) -> np.ndarray:
    """Marginal covariance ``C`` of a cluster with marginal means ``mu``."""
    mu = np.asarray(mu, dtype=float)
    K = np.asarray(K, dtype=float)
    if K.shape != (mu.shape[-1], mu.shape[-1]):
        raise ValueError(f"K has shape {K.shape}, expected {(mu.shape[-1],) * 2}")
    mm = _outer(mu)
    return mm * (assoc.sigma2 + assoc.omega2 * K) + assoc.rho2 * _diag(mu**assoc.r3)


def _dK(structure, assoc, T, j):
    return k_matrix_d1(structure, assoc.alpha, T, j)


def cov_d_gamma(mu, assoc: AssociationParams, structure, n) -> np.ndarray:
    """``dC / d gamma_n`` with ``n`` a name or index in (sigma2, omega2, rho2, alpha..., r3)."""
    structure = _as_structure(structure)
    mu = np.asarray(mu, dtype=float)
    T = mu.shape[-1]
    name = _resolve(structure, n)
    if name == "sigma2":
        return _outer(mu)
    if name == "omega2":
        return _outer(mu) * k_matrix(structure, assoc.alpha, T)
    if name == "rho2":
        return _diag(mu**assoc.r3)
    if name == "r3":
        return assoc.rho2 * _diag(mu**assoc.r3 * np.log(mu))
    j = int(name[5:]) - 1
    return assoc.omega2 * _outer(mu) * _dK(structure, assoc, T, j)


def cov_d2_gamma(mu, assoc: AssociationParams, structure, n, m) -> np.ndarray | None:
    """Mixed second derivative ``d2C / d gamma_n d gamma_m``; ``None`` when identically zero."""
    structure = _as_structure(structure)
    mu = np.asarray(mu, dtype=float)
    T = mu.shape[-1]
    a, b = sorted((_resolve(structure, n), _resolve(structure, m)), key=_order_key)
    if a.startswith("alpha") and b.startswith("alpha"):
        j, k = int(a[5:]) - 1, int(b[5:]) - 1
        return assoc.omega2 * _outer(mu) * k_matrix_d2(structure, assoc.alpha, T, j, k)
    if a == "omega2" and b.startswith("alpha"):
        return _outer(mu) * _dK(structure, assoc, T, int(b[5:]) - 1)
    if a == "rho2" and b == "r3":
        return _diag(mu**assoc.r3 * np.log(mu))
    if a == "r3" and b == "r3":
        return assoc.rho2 * _diag(mu**assoc.r3 * np.log(mu) ** 2)
    return None


def _order_key(name):
    order = {"sigma2": 0, "omega2": 1, "rho2": 2, "r3": 10_000}
    return order.get(name, 3 + (int(name[5:]) if name.startswith("alpha") else 0))


def _resolve(structure: CorrelationStructure, n) -> str:
    names = ["sigma2", "omega2", "rho2"] + [f"alpha{k}" for k in range(1, structure.n_alpha + 1)] + ["r3"]
    if isinstance(n, str):
        if n not in names:
            raise IndexError(f"unknown association parameter {n!r}")
        return n
    if not 0 <= int(n) < len(names):
        raise IndexError(f"association index {n} out of range (0..{len(names) - 1})")
    return names[int(n)]


def cov_d_beta(mu, dmu, assoc: AssociationParams, K) -> np.ndarray:
    """``dC / d beta_m`` given ``dmu = d mu / d beta_m``."""
    mu = np.asarray(mu, dtype=float)
    dmu = np.asarray(dmu, dtype=float)
    if dmu.shape != mu.shape:
        raise ValueError("mu and dmu must have the same shape")
    K = np.asarray(K, dtype=float)
    cross = dmu[..., :, None] * mu[..., None, :]
    cross = cross + np.swapaxes(cross, -1, -2)
    return cross * (assoc.sigma2 + assoc.omega2 * K) + assoc.rho2 * assoc.r3 * _diag(
        mu ** (assoc.r3 - 1) * dmu
    )


def cov_d_gamma_beta(mu, dmu, assoc: AssociationParams, structure, n) -> np.ndarray:
    """Mixed derivative ``d2C / d gamma_n d beta_m`` given ``dmu = d mu / d beta_m``."""
    structure = _as_structure(structure)
    mu = np.asarray(mu, dtype=float)
    dmu = np.asarray(dmu, dtype=float)
    T = mu.shape[-1]
    name = _resolve(structure, n)
    cross = dmu[..., :, None] * mu[..., None, :]
    cross = cross + np.swapaxes(cross, -1, -2)
    if name == "sigma2":
        return cross
    if name == "omega2":
        return cross * k_matrix(structure, assoc.alpha, T)
    if name == "rho2":
        return assoc.r3 * _diag(mu ** (assoc.r3 - 1) * dmu)
    if name == "r3":
        # d/d beta of rho2 * mu**r3 * log(mu)
        return assoc.rho2 * _diag(mu ** (assoc.r3 - 1) * dmu * (assoc.r3 * np.log(mu) + 1))
    j = int(name[5:]) - 1
    return assoc.omega2 * cross * _dK(structure, assoc, T, j)


def blup_predict(theta, cluster, model: ModelSpec) -> np.ndarray:
    """Best linear unbiased predictor of the latent process ``Q`` for one cluster.

    ``Q_hat = 1 + cov(Q, Y) C^{-1} (y - mu)`` with
    ``cov(Q_t, Y_t') = mu_t' (sigma2 + omega2 K_tt')``.

    Parameters
    ----------
    theta : Theta
        Regression coefficients and association parameters.
    cluster : ClusterData
    model : ModelSpec
        Supplies the correlation structure.

    Returns
    -------
    ndarray of shape (T,)
    """
    assoc = theta.assoc
    mu = np.exp(cluster.X @ np.asarray(theta.beta, dtype=float))
    T = mu.shape[0]
    K = k_matrix(model.structure, assoc.alpha, T)
    C = build_cluster_cov(mu, assoc, K)
    cov_qy = (assoc.sigma2 + assoc.omega2 * K) * mu[None, :]
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"covariance of cluster {cluster.cluster_id!r} is not positive definite"
        ) from exc
    z = np.linalg.solve(L.T, np.linalg.solve(L, cluster.y - mu))
    return 1.0 + cov_qy @ z
