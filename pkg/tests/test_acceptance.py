"""Acceptance gate: nine end-to-end checks at their stated tolerances.

Each test records a one-line PASS/FAIL verdict (shown in the terminal
summary) before asserting. Criteria 5 and 6 share one simulation study.
"""

import time

import numpy as np
import pytest

from _acceptance import record
from _oracles import brute_cov, central_diff, irls
from tweediemix.bias import evaluate, godambe_beta, penalty
from tweediemix.covariance import (
    AssociationParams,
    CorrelationStructure,
    ModelSpec,
    build_cluster_cov,
    cov_d_gamma,
    k_matrix,
    k_matrix_d1,
    k_matrix_d2,
)
from tweediemix.estimating import ClusterData, Theta, ee_blocks
from tweediemix.inference import empirical_variability, sandwich_cov
from tweediemix.simulate import design_matrix, gen_dataset, marginal_cv, simulate_clusters, preset_config
from tweediemix.solver import SolverConfig, fit
from tweediemix.study import run_study

STUDY_SEED = 20261015
ASSOCIATION = ["sigma2", "omega2", "rho2", "alpha1"]


def test_criterion_1_marginal_cv():
    t0 = time.perf_counter()
    pois = marginal_cv(preset_config("poisson"))
    gam = marginal_cv(preset_config("gamma"))
    ok = abs(pois - 0.497) <= 0.002 and abs(gam - 0.579) <= 0.002
    record(1, ok, "marginal CV", f"poisson {pois:.4f} (0.497), gamma {gam:.4f} (0.579), {time.perf_counter() - t0:.2f}s")
    assert ok


def _random_structure(rng):
    kind = rng.choice(["ar1", "ma", "independent", "exchangeable_glmm"], p=[0.4, 0.4, 0.1, 0.1])
    if kind == "ar1":
        return CorrelationStructure("ar1"), (float(rng.uniform(0.0, 0.95)),)
    if kind == "ma":
        q = int(rng.integers(1, 4))
        return CorrelationStructure("ma", q), tuple(rng.uniform(0.0, 0.9, q))
    return CorrelationStructure(str(kind)), ()


def test_criterion_2_covariance_oracle():
    rng = np.random.default_rng(2)
    worst_c, worst_k = 0.0, 0.0
    for _ in range(20):
        structure, alpha = _random_structure(rng)
        T = int(rng.integers(2, 9))
        mu = rng.uniform(0.1, 8.0, T)
        s2, o2, r2 = rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5), rng.uniform(0.01, 0.5)
        r3 = rng.uniform(1.0, 3.0)
        if structure.kind == "independent":
            s2 = o2 = 0.0
        if structure.kind == "exchangeable_glmm":
            o2 = 0.0
        a = AssociationParams(s2, o2, r2, alpha, r3)
        C = build_cluster_cov(mu, a, k_matrix(structure, alpha, T))
        ref = brute_cov(mu, s2, o2, r2, structure.kind, alpha, r3)
        worst_c = max(worst_c, np.abs(C - ref).max())
        for k in range(structure.n_alpha):
            fd = central_diff(lambda x: k_matrix(structure, tuple(x), T), np.array(alpha), h=1e-6)[..., k]
            d1 = k_matrix_d1(structure, alpha, T, k)
            worst_k = max(worst_k, np.max(np.abs(d1 - fd) / np.maximum(np.abs(fd), 1.0)))
            for m in range(structure.n_alpha):
                fd2 = central_diff(lambda x: k_matrix_d1(structure, tuple(x), T, k), np.array(alpha), h=1e-5)[..., m]
                d2 = k_matrix_d2(structure, alpha, T, k, m)
                worst_k = max(worst_k, np.max(np.abs(d2 - fd2) / np.maximum(np.abs(fd2), 1.0)))
    ok = worst_c <= 1e-10 and worst_k <= 1e-5
    record(2, ok, "covariance oracle", f"max |C - oracle| {worst_c:.2e} (<=1e-10), max rel K-derivative error {worst_k:.2e} (<=1e-5)")
    assert ok


def test_criterion_3_simulator_moments():
    cfg = preset_config("gamma")
    n = 100_000
    X = np.broadcast_to(design_matrix(cfg), (n, cfg.T, 2))
    rng = np.random.default_rng(3)
    y, _ = simulate_clusters(X, cfg.beta, cfg.assoc, cfg.structure, cfg.r1, cfg.r2, cfg.r3, rng)
    mu = np.exp(design_matrix(cfg) @ np.array(cfg.beta))
    C = build_cluster_cov(mu, cfg.assoc, k_matrix(cfg.structure, cfg.assoc.alpha, cfg.T))
    r = (y - mu) / mu  # scaled residuals keep every time point on a common footing
    worst = 0.0
    details = []
    for h in range(6):
        stat = (r[:, : cfg.T - h] * r[:, h:]).mean(axis=1)
        target = np.mean(np.diag(C, h) / (mu[: cfg.T - h] * mu[h:]))
        z = (stat.mean() - target) / (stat.std(ddof=1) / np.sqrt(n))
        worst = max(worst, abs(z))
        details.append(f"{z:+.2f}")
    ok = worst < 4
    record(3, ok, "simulator moments", f"lag 0-5 z-scores {', '.join(details)} (|z|<4)")
    assert ok


def _trace_penalty(theta, data, model):
    J = godambe_beta(theta, data, model)
    Jinv = np.linalg.inv(J)
    b = np.zeros(len(model.gamma_names))
    for c in data:
        mu = np.exp(c.X @ theta.beta)
        D = mu[:, None] * c.X
        Ci = np.linalg.inv(build_cluster_cov(mu, theta.assoc, k_matrix(model.structure, theta.assoc.alpha, mu.size)))
        for n, name in enumerate(model.gamma_names):
            W = Ci @ cov_d_gamma(mu, theta.assoc, model.structure, name) @ Ci
            b[n] += np.trace(D.T @ W @ D @ Jinv)
    return b


def test_criterion_4_unbiased_estimating_functions():
    cfg = preset_config("gamma", seed=4)
    model = ModelSpec(cfg.structure)
    theta = Theta(np.array(cfg.beta), cfg.assoc)
    rows = []
    b = None
    for rep in range(500):
        data, _ = gen_dataset(cfg, rep)
        _, ee, pen = evaluate(theta, data, model, level="b", cross=False)
        b = pen.b if b is None else b
        rows.append(np.concatenate([ee.psi_beta, ee.psi_gamma + pen.b]))
    psi = np.array(rows)
    p = len(cfg.beta)
    mean = psi.mean(axis=0)
    se = psi.std(axis=0, ddof=1) / np.sqrt(len(psi))
    offset = np.concatenate([np.zeros(p), b])
    z = (mean - offset) / se
    b_ref = _trace_penalty(theta, gen_dataset(cfg, 0)[0], model)
    b_ok = np.allclose(b, b_ref, rtol=1e-10)
    ok = bool(np.all(np.abs(z) < 4)) and b_ok
    record(4, ok, "estimating-function unbiasedness",
           f"z-scores psi_beta {np.round(z[:p], 2).tolist()}, corrected psi_gamma - b {np.round(z[p:], 2).tolist()} (|z|<4); "
           f"b matches trace formula: {b_ok}")
    assert ok


@pytest.fixture(scope="module")
def gamma_study():
    cfg = preset_config("gamma", r1=2.0, r2=2.0, replicates=400, seed=STUDY_SEED)
    t0 = time.perf_counter()
    report = run_study([cfg], SolverConfig(), variant="empirical")
    return report, time.perf_counter() - t0


def test_criterion_5_bias_correction_direction(gamma_study):
    report, secs = gamma_study
    med = report.medians().set_index("parameter").loc["sigma2"]
    dc = abs(med.median_corrected - 0.05)
    du = abs(med.median_uncorrected - 0.05)
    ok = dc < du
    record(5, ok, "bias-correction direction",
           f"median sigma2 corrected {med.median_corrected:.4f} vs uncorrected {med.median_uncorrected:.4f} "
           f"(truth 0.05; n={int(med.n_corrected)}/{int(med.n_uncorrected)} converged; {secs:.0f}s)")
    assert ok


def test_criterion_6_coverage_pattern(gamma_study):
    report, _ = gamma_study
    cov = report.coverage().iloc[0]
    beta_ok = 0.90 <= cov["beta1"] <= 0.97
    assoc_ok = all(cov[n] >= 0.97 for n in ASSOCIATION)
    ok = beta_ok and assoc_ok
    detail = f"beta1 {cov['beta1']:.3f} (in [0.90, 0.97]); " + ", ".join(f"{n} {cov[n]:.3f}" for n in ASSOCIATION) + " (each >=0.97)"
    record(6, ok, "coverage pattern", detail)
    assert beta_ok, detail
    assert assoc_ok, detail


def test_criterion_7_latent_power_robustness():
    cells = []
    ok = True
    for r1 in (1.5, 3.0):
        for r2 in (1.5, 3.0):
            cfg = preset_config("gamma", r1=r1, r2=r2, seed=7)
            model = ModelSpec(cfg.structure)
            est = []
            for rep in range(200):
                data, _ = gen_dataset(cfg, rep, config_id=int(2 * r1 + r2))
                try:
                    res = fit(data, model)
                except (np.linalg.LinAlgError, FloatingPointError):
                    continue
                if res.converged:
                    est.append(res.theta_hat.beta)
            est = np.array(est)
            med = np.median(est, axis=0)
            se = np.sqrt(np.pi / 2) * est.std(axis=0, ddof=1) / np.sqrt(len(est))
            z = (med - np.array(cfg.beta)) / se
            cell_ok = bool(np.all(np.abs(z) < 4))
            ok &= cell_ok
            cells.append(f"(r1={r1:g}, r2={r2:g}) n={len(est)} z={np.round(z, 2).tolist()}")
    record(7, ok, "latent-power robustness", "; ".join(cells) + " (|z|<4)")
    assert ok


def test_criterion_8_identities(gamma_data):
    cfg, data = gamma_data
    model = ModelSpec(cfg.structure)
    res = fit(data, model)
    blocks = res.corrected
    exact = np.array_equal(ee_blocks(res.theta_hat, data, model).V_beta, -blocks.S_beta)

    p = blocks.p
    S = np.zeros((blocks.psi.size,) * 2)
    S[:p, :p] = blocks.S_beta
    S[p:, :p] = blocks.S_gamma_beta
    S[p:, p:] = blocks.S_gamma
    Si = np.linalg.inv(S)
    V = empirical_variability(blocks.per_cluster_psi)
    brute = Si @ V @ Si.T
    sw_err = np.abs(sandwich_cov(blocks, "empirical") - brute).max()

    theta = res.theta_hat
    g0 = model.gamma_vector(theta.assoc)
    logdet = lambda g: -np.linalg.slogdet(godambe_beta(Theta(theta.beta, model.with_gamma(theta.assoc, g)), data, model))[1]
    fd = central_diff(logdet, g0, h=1e-6)
    b = penalty(theta, data, model)
    b_err = np.max(np.abs(b - fd) / np.maximum(np.abs(fd), 1.0))

    ok = exact and sw_err <= 1e-10 and b_err <= 1e-6
    record(8, ok, "quasi-score and block identities",
           f"V_beta == -S_beta: {exact}; sandwich vs brute force {sw_err:.1e} (<=1e-10); b vs FD of log|J^-1| {b_err:.1e} (<=1e-6)")
    assert ok


def test_criterion_9_degenerate_model_is_glm():
    rng = np.random.default_rng(9)
    data = []
    for i in range(20):
        X = np.column_stack([np.ones(10), rng.normal(size=10), np.linspace(-1, 1, 10)])
        y = rng.poisson(np.exp(X @ [1.2, 0.4, -0.3])).astype(float)
        data.append(ClusterData(y, X, cluster_id=i))
    model = ModelSpec.preset("ar1", r3=1.0, fixed={"sigma2": 0.0, "omega2": 0.0})
    res = fit(data, model)
    X = np.concatenate([c.X for c in data])
    y = np.concatenate([c.y for c in data])
    err = np.abs(res.theta_hat.beta - irls(X, y, 1.0)).max()
    ok = res.converged and err <= 1e-8
    record(9, ok, "degenerate model equals GLM", f"max |beta - IRLS| {err:.1e} (<=1e-8), converged {res.converged}")
    assert ok
