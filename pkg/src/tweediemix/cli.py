"""Command-line interface: ``tweediemix {fit,simulate,study,predict,demo}``.

Exit codes: 0 success, 1 input or usage error, 2 fit did not converge.
Configuration is a YAML file; the output directory is taken from ``--out``,
then the ``TWEEDIEMIX_OUTDIR`` environment variable, then ``output`` in the
configuration, then ``./tweediemix-out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .covariance import AssociationParams, CorrelationStructure, ModelSpec, blup_predict
from .estimating import Theta
from .inference import sandwich
from .io import Columns, DataError, Filters, Formula, apply_filters, read_long_csv, to_clusters, write_long_csv
from .simulate import SimConfig, gen_dataset, preset_config
from .solver import InitializationError, SolverConfig, fit
from .study import run_study

__all__ = ["main", "ConfigError"]

log = logging.getLogger("tweediemix")

OUTDIR_ENV = "TWEEDIEMIX_OUTDIR"
EXIT_OK, EXIT_INPUT, EXIT_NOCONV = 0, 1, 2

_SECTIONS = {"data", "model", "solver", "inference", "output", "seed", "simulate", "study"}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors share the input-error exit code; 2 means non-convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def load_config(path) -> dict:
    """Read a YAML configuration file into a mapping."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = cfg or {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = set(cfg) - _SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return cfg


def _outdir(args, cfg) -> Path:
    out = args.out or os.environ.get(OUTDIR_ENV) or cfg.get("output") or "tweediemix-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _section(cfg, name) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def _keys(sec, allowed, name):
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"section {name!r}: unknown key(s) {sorted(unknown)}")


def model_from_config(cfg) -> tuple[ModelSpec, Formula]:
    sec = _section(cfg, "model")
    _keys(sec, {"structure", "order", "r3", "r3_free", "fixed", "formula"}, "model")
    kind = sec.get("structure", "ar1")
    order = int(sec.get("order", 1))
    model = ModelSpec.preset(
        kind,
        order=order,
        r3=float(sec.get("r3", 2.0)),
        r3_free=bool(sec.get("r3_free", False)),
        fixed={k: float(v) for k, v in (sec.get("fixed") or {}).items()},
    )
    return model, Formula(sec.get("formula", ["1"]))


def data_from_config(cfg) -> tuple[Columns, Filters]:
    sec = _section(cfg, "data")
    _keys(sec, {"cluster", "time", "response", "group", "filters"}, "data")
    columns = Columns(
        cluster=sec.get("cluster", "cluster_id"),
        time=sec.get("time", "time"),
        response=sec.get("response", "y"),
        group=sec.get("group"),
    )
    filt = sec.get("filters") or {}
    _keys(filt, {"drop_first", "every", "truncate"}, "data.filters")
    return columns, Filters(**filt)


def solver_from_config(cfg, args=None) -> SolverConfig:
    sec = dict(_section(cfg, "solver"))
    _keys(sec, {"max_iter", "tol", "step_halvings_max", "bias_correction", "bounds"}, "solver")
    if "bounds" in sec:
        sec["bounds"] = {k: tuple(float(x) for x in v) for k, v in sec["bounds"].items()}
    if "tol" in sec:
        sec["tol"] = float(sec["tol"])
    cfg_solver = SolverConfig(**sec)
    if args is not None and getattr(args, "no_bias_correction", False):
        cfg_solver = replace(cfg_solver, bias_correction=False)
    return cfg_solver


def _variant(cfg, args) -> str:
    sec = _section(cfg, "inference")
    _keys(sec, {"sandwich", "centered"}, "inference")
    choice = getattr(args, "sandwich", None) or sec.get("sandwich", "empirical")
    return {"semi": "semi_empirical", "semi_empirical": "semi_empirical", "empirical": "empirical"}[choice]


def sim_config(sec: dict, defaults: dict | None = None) -> SimConfig:
    """Build a :class:`SimConfig` from a mapping; ``response`` selects a preset row."""
    sec = {**(defaults or {}), **sec}
    allowed = {"response", "r1", "r2", "r3", "beta", "sigma2", "omega2", "rho2", "alpha",
               "structure", "order", "I", "T", "replicates", "seed", "resample_zero_cluster", "name"}
    _keys(sec, allowed, "simulate")
    base = preset_config(sec["response"]) if "response" in sec else SimConfig()
    assoc = base.assoc
    structure = base.structure
    if "structure" in sec:
        kind = sec["structure"]
        structure = CorrelationStructure(kind, int(sec.get("order", 1)) if kind in ("ma", "ar1") else 0)
        if "alpha" not in sec:
            assoc = replace(assoc, alpha=(0.0,) * structure.n_alpha)
    vals = {k: float(sec[k]) for k in ("sigma2", "omega2", "rho2") if k in sec}
    if "alpha" in sec:
        vals_alpha = tuple(float(a) for a in np.atleast_1d(sec["alpha"]))
        assoc = replace(assoc, alpha=vals_alpha)
    assoc = replace(assoc, **vals)
    kw = {k: sec[k] for k in ("r1", "r2", "r3", "I", "T", "replicates", "seed", "resample_zero_cluster", "name") if k in sec}
    if "beta" in sec:
        kw["beta"] = tuple(float(b) for b in sec["beta"])
    return replace(base, assoc=assoc, structure=structure, **kw)


def _fmt_sig(x):
    return "" if not np.isfinite(x) else f"{x:.6g}"


def _fmt_p(x):
    return "" if not np.isfinite(x) else f"{x:.4f}"


def parameter_table(result, variant: str, centered: bool = False) -> pd.DataFrame:
    """Estimates, standard errors, Wald p-values and 95% intervals.

    The null for ``r3`` is 2 (gamma response); all others are tested against 0.
    """
    sw = sandwich(result, variant, centered=centered)
    tab = sw.table()
    tab["null"] = [2.0 if n == "r3" else 0.0 for n in tab.parameter]
    return tab[["parameter", "estimate", "se", "null", "p_value", "ci_low", "ci_high"]], sw


def _write_parameters(path, tab):
    out = tab.copy()
    for col in ("estimate", "se", "ci_low", "ci_high"):
        out[col] = out[col].map(_fmt_sig)
    out["null"] = out["null"].map(lambda v: f"{v:g}")
    out["p_value"] = out["p_value"].map(_fmt_p)
    out.to_csv(path, index=False)
    return out


def _prepare(data_path, cfg):
    columns, filters = data_from_config(cfg)
    model, formula = model_from_config(cfg)
    df = read_long_csv(data_path, columns, covariates=formula.columns)
    df = apply_filters(df, columns, filters)
    return df, columns, filters, model, formula


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    df, columns, filters, model, formula = _prepare(args.data, cfg)
    clusters = to_clusters(df, columns, formula)
    solver = solver_from_config(cfg, args)
    variant = _variant(cfg, args)
    result = fit(clusters, model, solver)
    out = _outdir(args, cfg)

    centered = bool(_section(cfg, "inference").get("centered", False))
    tab, sw = parameter_table(result, variant, centered)
    names = list(tab.parameter)
    for k, n in enumerate(names):
        if n.startswith("beta"):
            names[k] = formula.terms[int(n[4:])]
    tab.insert(1, "term", names)
    printed = _write_parameters(out / "parameters.csv", tab)

    trace = pd.DataFrame(
        [
            {
                "iteration": t["iteration"],
                "change": t["change"],
                "psi_norm": t["psi_norm"],
                "halvings": t["halvings"],
                "ridge": t["ridge"],
                "clipped": ";".join(t["clipped"]),
                **dict(zip(result.names, t["theta"])),
            }
            for t in result.trace
        ]
    )
    trace.to_csv(out / "trace.csv", index=False, float_format="%.10g")
    cov = pd.DataFrame(sw.cov_theta, index=result.names, columns=result.names)
    cov.to_csv(out / "covariance.csv", float_format="%.6g")

    a = result.theta_hat.assoc
    summary = {
        "converged": result.converged,
        "iterations": result.iterations,
        "bias_correction": result.bias_correction,
        "sandwich": variant,
        "centered": centered,
        "n_clusters": len(clusters),
        "n_obs": int(sum(c.T for c in clusters)),
        "beta": [float(b) for b in result.theta_hat.beta],
        "association": {"sigma2": a.sigma2, "omega2": a.omega2, "rho2": a.rho2, "alpha": list(a.alpha), "r3": a.r3},
        "model": {
            "structure": model.structure.kind,
            "order": model.structure.order,
            "r3": model.r3,
            "r3_free": model.r3_free,
            "fixed": model.fixed,
            "formula": formula.terms,
        },
        "data": {**asdict(columns), "filters": asdict(filters)},
    }
    (out / "fit_result.json").write_text(json.dumps(summary, indent=2) + "\n")

    print(printed.to_string(index=False))
    status = "converged" if result.converged else "did NOT converge"
    print(f"\n{status} after {result.iterations} iterations; outputs in {out}")
    return EXIT_OK if result.converged else EXIT_NOCONV


def _load_fit(path):
    with open(path, encoding="utf-8") as fh:
        res = json.load(fh)
    m = res["model"]
    model = ModelSpec.preset(m["structure"], order=m["order"] or 1, r3=m["r3"], r3_free=m["r3_free"], fixed=m["fixed"])
    a = res["association"]
    theta = Theta(np.array(res["beta"]), AssociationParams(a["sigma2"], a["omega2"], a["rho2"], tuple(a["alpha"]), a["r3"]))
    d = res["data"]
    filters = Filters(**d.pop("filters"))
    return theta, model, Formula(m["formula"]), Columns(**d), filters


def cmd_predict(args) -> int:
    theta, model, formula, columns, filters = _load_fit(args.fit)
    df = read_long_csv(args.data, columns, covariates=formula.columns)
    df = apply_filters(df, columns, filters)
    clusters = to_clusters(df, columns, formula)
    frames = []
    for c in clusters:
        q = blup_predict(theta, c, model)
        mu = np.exp(c.X @ theta.beta)
        frames.append(
            pd.DataFrame(
                {columns.cluster: c.cluster_id, columns.time: c.times, columns.response: c.y,
                 "mu_hat": mu, "q_hat": q, "fitted": mu * q}
            )
        )
    out = _outdir(args, {})
    pd.concat(frames).to_csv(out / "predictions.csv", index=False, float_format="%.10g")
    print(f"wrote {out / 'predictions.csv'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    sec = dict(_section(cfg, "simulate"))
    replicate = int(sec.pop("replicate", 0))
    if args.seed is not None:
        sec["seed"] = args.seed
    elif "seed" in cfg:
        sec.setdefault("seed", int(cfg["seed"]))
    config = sim_config(sec)
    clusters, latents = gen_dataset(config, replicate)
    out = _outdir(args, cfg)
    write_long_csv(out / "simulated.csv", clusters, {"trend": 1})
    a = config.assoc
    truth = {
        "r1": config.r1, "r2": config.r2, "r3": config.r3,
        "beta": list(config.beta),
        "sigma2": a.sigma2, "omega2": a.omega2, "rho2": a.rho2, "alpha": list(a.alpha),
        "structure": config.structure.kind, "order": config.structure.order,
        "I": config.I, "T": config.T, "seed": config.seed, "replicate": replicate,
        "design": "intercept + trend, trend = t/(T-1) - 0.5",
        "z_cluster": [float(lat.z_cluster) for lat in latents],
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2) + "\n")
    print(f"wrote {config.I} clusters of length {config.T} to {out / 'simulated.csv'}")
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = load_config(args.config)
    sec = dict(_section(cfg, "study"))
    grid = sec.pop("grid", None) or []
    variant = _variant({"inference": {"sandwich": sec.pop("sandwich", "empirical")}}, args)
    if args.seed is not None:
        sec["seed"] = args.seed
    elif "seed" in cfg:
        sec.setdefault("seed", int(cfg["seed"]))
    if not grid:
        raise ConfigError("study grid is empty; list at least one configuration under study.grid")
    configs = [sim_config(dict(entry), sec) for entry in grid]
    report = run_study(configs, solver_from_config(cfg), variant=variant, n_jobs=args.threads)
    out = _outdir(args, cfg)
    report.write(out)
    print(report.coverage().to_string(index=False))
    print(f"\noutputs in {out}")
    return EXIT_OK


def cmd_demo(args) -> int:
    from .demo import DEMO_CONFIG, demo_frame

    out = _outdir(args, {})
    seed = 2007 if args.seed is None else args.seed
    df = demo_frame(seed)
    data = out / "otolith_demo.csv"
    df.to_csv(data, index=False, float_format="%.10g")
    config = out / "otolith_demo.yaml"
    config.write_text(yaml.safe_dump(DEMO_CONFIG, sort_keys=False))
    print(f"wrote {data} and {config}")
    fit_args = argparse.Namespace(data=data, config=config, out=str(out), no_bias_correction=False, sandwich=None)
    code = cmd_fit(fit_args)
    cmd_predict(argparse.Namespace(fit=out / "fit_result.json", data=data, out=str(out)))
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tweediemix", description="Tweedie longitudinal mixed models fitted by estimating equations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model to long-format data")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--no-bias-correction", action="store_true")
    p.add_argument("--sandwich", choices=["empirical", "semi"])
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="simulate one dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="run a Monte Carlo study")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--sandwich", choices=["empirical", "semi"])
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("predict", help="latent-process predictions from a saved fit")
    p.add_argument("--fit", required=True, help="fit_result.json written by 'fit'")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("demo", help="generate, fit and predict the synthetic band-width demo")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, ConfigError, InitializationError, FileNotFoundError, KeyError, TypeError, ValueError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"tweediemix: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
