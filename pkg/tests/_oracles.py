"""Independent reference implementations used only by the tests.

Everything here is written from the model definitions with plain loops, so
it shares no code with the package beyond the data containers.
"""

import numpy as np


def filter_coefs(kind, alpha, tol=1e-18):
    """Filter weights alpha_0 = 1, alpha_1, ... of the latent linear process."""
    alpha = list(alpha)
    if kind == "ar1":
        a = alpha[0]
        if a == 0:
            return np.array([1.0])
        n = int(np.ceil(np.log(tol) / np.log(a))) + 1
        return a ** np.arange(n)
    if kind == "ma":
        return np.array([1.0] + alpha)
    return np.array([1.0])


def brute_k(kind, alpha, T):
    """K_tt' = sum over (s, s') with t - s = t' - s' of alpha_s alpha_s'."""
    w = filter_coefs(kind, alpha)
    K = np.zeros((T, T))
    for t in range(T):
        for u in range(T):
            total = 0.0
            for s in range(len(w)):
                s2 = s - (t - u)
                if 0 <= s2 < len(w):
                    total += w[s] * w[s2]
            K[t, u] = total
    return K


def brute_cov(mu, sigma2, omega2, rho2, kind, alpha, r3):
    """Marginal covariance by direct double sums over filter weights."""
    mu = np.asarray(mu, dtype=float)
    T = mu.size
    K = brute_k(kind, alpha, T) if kind in ("ar1", "ma") else np.eye(T)
    C = np.zeros((T, T))
    for t in range(T):
        for u in range(T):
            C[t, u] = mu[t] * mu[u] * (sigma2 + omega2 * K[t, u])
        C[t, t] += rho2 * mu[t] ** r3
    return C


def irls(X, y, power=1.0, tol=1e-14, max_iter=500):
    """Fisher scoring for a log-link GLM with variance proportional to mu**power."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    beta = np.linalg.lstsq(X, np.log(y + 0.5), rcond=None)[0]
    for _ in range(max_iter):
        eta = X @ beta
        mu = np.exp(eta)
        w = mu ** (2.0 - power)
        z = eta + (y - mu) / mu
        new = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * z))
        if np.max(np.abs(new - beta)) < tol:
            return new
        beta = new
    return beta


def central_diff(f, x, h=1e-6):
    """Central finite-difference Jacobian of f at x (columns index x)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    out = np.zeros(f0.shape + x.shape)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[..., k] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return out
