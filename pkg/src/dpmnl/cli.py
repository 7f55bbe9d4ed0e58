"""Batch command-line front end.

Every command accepts ``--config run.json``. The JSON object may hold the
shared keys (``seed``, ``threads``, ``output_dir``, ``data``, ``attributes``,
``space``) and one block per command (``simulate``, ``estimate``,
``crossval``, ``summarize``, ``dp_demo``) whose keys mirror the long flags
with dashes replaced by underscores. Flags given on the command line win.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 non-convergence (outputs are still written).
"""
from __future__ import annotations

import os

# single-threaded BLAS keeps floating-point reductions independent of --threads
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from . import dpm_em, evaluate, lc_em, simgen
from .choice_data import AttributeSpec, DataError, KEY_COLUMNS, load_csv, scale_covariates, write_csv
from .mnl import UtilitySpec, fit_mnl, unscale_params
from .stick_breaking import ConcentrationPrior, sample_stick_dp

logger = logging.getLogger("dpmnl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGED = 0, 2, 3, 4
OUTPUT_DIR_ENV = "DPMNL_OUTPUT_DIR"
DP_DEMO_RESIDUAL = 1e-6


class UsageError(Exception):
    pass


# -- configuration --------------------------------------------------------------------

_ATTRIBUTE_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "role": {"enum": ["generic", "cost"]},
        "constraint": {"enum": ["free", "strictly-negative", "bounded-negative"]},
        "upper_bound": {"type": "number"},
    },
    "required": ["name"],
    "additionalProperties": False,
}


def _block(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


_INT = {"type": "integer"}
_NUM = {"type": "number"}
_STR = {"type": "string"}
_BOOL = {"type": "boolean"}
_MODEL = {"enum": ["mnl", "lc", "dpm"]}

COMMAND_KEYS = {
    "simulate": {"experiment": {"enum": list(simgen.EXPERIMENTS)}, "n": _INT, "t": _INT,
                 "j": _INT},
    "estimate": {"model": _MODEL, "truncation": _INT, "k": _INT, "k_min": _INT, "k_max": _INT,
                 "alpha_shape": _NUM, "alpha_scale": _NUM, "prior_scale": _NUM,
                 "rel_tol": _NUM, "max_iter": _INT, "n_starts": _INT,
                 "scale_covariates": _BOOL},
    "crossval": {"model": _MODEL, "folds": _INT, "truncation": _INT, "k": _INT,
                 "k_min": _INT, "k_max": _INT, "alpha_shape": _NUM, "alpha_scale": _NUM,
                 "prior_scale": _NUM, "rel_tol": _NUM, "max_iter": _INT, "n_starts": _INT},
    "summarize": {"model_json": _STR, "draws": _INT, "bandwidth": _NUM, "grid_points": _INT},
    "dp_demo": {"alphas": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "draws": _INT, "bins": _INT, "bin_range": {"type": "array", "items": _NUM,
                                                            "minItems": 2, "maxItems": 2}},
}

SHARED_KEYS = {"seed": _INT, "threads": _INT, "output_dir": _STR, "data": _STR,
               "attributes": {"type": "array", "items": _ATTRIBUTE_SCHEMA},
               "space": {"enum": ["wtp", "preference"]}}

CONFIG_SCHEMA = _block({**SHARED_KEYS, **{c.replace("-", "_"): _block(p)
                                           for c, p in COMMAND_KEYS.items()}})


def load_config(path: str | None, command: str) -> dict:
    """Validated flat settings for `command` (shared keys plus the command block)."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {where}: {exc.message}") from None
    out = {k: v for k, v in raw.items() if k in SHARED_KEYS}
    out.update(raw.get(command.replace("-", "_"), {}))
    return out


def merge(args: argparse.Namespace, config: dict, defaults: dict) -> dict:
    """Flags override config values, which override defaults."""
    out = dict(defaults)
    out.update(config)
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config", "verbose", "command"):
            out[k] = v
    return out


def output_dir(settings: dict) -> Path:
    d = Path(settings.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV) or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_json(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# -- data and model setup -----------------------------------------------------------

def infer_attributes(path: str) -> list[AttributeSpec]:
    """Every non-key column is a free attribute; a column named ``cost`` is the
    strictly negative cost attribute."""
    try:
        header = pd.read_csv(path, nrows=0, encoding="utf-8").columns
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    skip = set(KEY_COLUMNS) | {"available", "chosen"}
    return [AttributeSpec(c, "cost", "strictly-negative") if c == "cost" else AttributeSpec(c)
            for c in header if c not in skip]


def load_data(settings: dict) -> tuple:
    if not settings.get("data"):
        raise UsageError("no dataset given (--data)")
    if settings.get("attributes"):
        attrs = [AttributeSpec.from_dict(a) for a in settings["attributes"]]
    else:
        attrs = infer_attributes(settings["data"])
    has_cost = any(a.role == "cost" for a in attrs)
    space = settings.get("space") or ("wtp" if has_cost else "preference")
    try:
        spec = UtilitySpec(space, attrs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return load_csv(settings["data"], attrs), spec


def dpm_config(s: dict) -> dpm_em.DPMConfig:
    return dpm_em.DPMConfig(K=s["truncation"],
                            alpha_prior=ConcentrationPrior(s["alpha_shape"], s["alpha_scale"]),
                            prior_scale=s["prior_scale"], rel_tol=s["rel_tol"],
                            max_iter=s["max_iter"], seed=s["seed"], threads=s["threads"])


def lc_config(s: dict) -> lc_em.LCConfig:
    return lc_em.LCConfig(rel_tol=s["rel_tol"], max_iter=s["max_iter"], seed=s["seed"],
                          n_starts=s["n_starts"], threads=s["threads"])


MODEL_DEFAULTS = {"seed": 0, "threads": 1, "truncation": 150, "alpha_shape": 2.0,
                  "alpha_scale": 2.0, "prior_scale": 5.0, "rel_tol": 1e-4, "max_iter": 1000,
                  "n_starts": 1, "k": None, "k_min": 1, "k_max": 6}


# -- commands -----------------------------------------------------------------------

def cmd_simulate(s: dict) -> int:
    spec = simgen.experiment(s["experiment"])
    cfg = simgen.SimConfig(s["n"], s["t"], s["j"], s["seed"])
    sim = simgen.simulate(spec, cfg)
    out = output_dir(s)
    stem = f"sim_{spec.id}"
    write_csv(sim.dataset, out / f"{stem}_data.csv")
    simgen.write_truth(sim, out / f"{stem}_truth.csv")
    rate = simgen.measure_error_rate(sim.utility, sim.chosen)
    write_json({"experiment": spec.id, "N": cfg.N, "T": cfg.T, "J": cfg.J, "seed": cfg.seed,
                "error_rate": rate}, out / f"{stem}_error_rate.json")
    logger.info("experiment %s: error rate %.4f", spec.id, rate)
    return EXIT_OK


def _components_frame(model) -> pd.DataFrame:
    names = model.spec.names
    df = pd.DataFrame([b.values for b in model.betas], columns=names)
    df.insert(0, "component", np.arange(1, model.K + 1))
    df.insert(1, "mass", model.masses)
    if isinstance(model, dpm_em.DPMModel):
        df.insert(2, "prior_share", model.prior_shares)
    return df


def _rescale_model(model, spec: UtilitySpec, factors: np.ndarray):
    model.betas[:] = [unscale_params(spec, b, factors) for b in model.betas]
    return model


def cmd_estimate(s: dict) -> int:
    data, spec = load_data(s)
    out = output_dir(s)
    factors = None
    if s.get("scale_covariates"):
        pref = UtilitySpec("preference", [AttributeSpec(a.name, a.role) for a in spec.attributes])
        ref = fit_mnl(pref, data.with_attributes(data.X, pref.attributes))
        data, factors = scale_covariates(data, ref.params.values)
        write_json({"attributes": spec.names, "factors": factors.tolist()},
                   out / "scale_factors.json")
    kind = s["model"]
    converged = True
    if kind == "mnl":
        model = evaluate.fit_mnl_model(data, spec)
    elif kind == "dpm":
        model = dpm_em.fit(data, spec, dpm_config(s))
        pd.DataFrame(model.trace).to_csv(out / "dpm_trace.csv", index=False, lineterminator="\n")
    else:
        if s["k"] is not None:
            s["k_min"] = s["k_max"] = s["k"]
        table, models = lc_em.sweep(data, spec, s["k_min"], s["k_max"], lc_config(s))
        evaluate.write_csv(table, out / "lc_sweep.csv")
        if not models:
            raise DataError("no LC model could be fitted")
        model = models[lc_em.best_k(table, "bic")]
        converged = all(m.converged for m in models.values())
        for K, m in models.items():
            if factors is not None:
                _rescale_model(m, spec, factors)
            write_json(m.to_dict(), out / f"lc_K{K}.json")
    if factors is not None and kind != "lc":
        if kind == "mnl":
            model.beta = unscale_params(spec, model.beta, factors)
        else:
            _rescale_model(model, spec, factors)
    converged = converged and model.converged
    write_json(model.to_dict(), out / f"{kind}_model.json")
    evaluate.write_csv(_components_frame(model), out / f"{kind}_components.csv")
    if spec.cost_index is not None:
        evaluate.write_csv(evaluate.summarize_wtp(model), out / f"{kind}_wtp_summary.csv")
    if kind == "dpm":
        logger.info("alpha_hat=%.4f occupied=%d of K=%d", model.alpha_hat, model.occupied, model.K)
    for f in model.flags:
        logger.warning("%s", f)
    return EXIT_OK if converged else EXIT_NONCONVERGED


def cmd_crossval(s: dict) -> int:
    data, spec = load_data(s)
    if s["folds"] > data.n_individuals:
        raise UsageError(f"--folds {s['folds']} exceeds the number of individuals "
                         f"({data.n_individuals})")
    if s["folds"] < 2:
        raise UsageError("--folds must be at least 2")
    kind = s["model"]
    out = output_dir(s)
    K = None
    if kind == "lc":
        K = s["k"]
        if K is None:
            table, _ = lc_em.sweep(data, spec, s["k_min"], s["k_max"], lc_config(s))
            evaluate.write_csv(table, out / "crossval_lc_sweep.csv")
            K = lc_em.best_k(table, "bic")
    config = dpm_config(s) if kind == "dpm" else lc_config(s) if kind == "lc" else None
    recipe = evaluate.ModelRecipe(kind, spec, K, config)
    report = evaluate.cross_validate(data, recipe, s["folds"], s["seed"], s["threads"])
    evaluate.write_csv(report.to_frame(), out / f"crossval_{kind}.csv")
    write_json({"model": kind, "K": K, "folds": s["folds"], "seed": s["seed"],
                "mean_predictive_loglik": report.mean, "standard_error": report.se,
                "complete": report.complete, "flags": report.flags},
               out / f"crossval_{kind}_summary.json")
    for f in report.flags:
        logger.warning("%s", f)
    return EXIT_OK if not report.flags else EXIT_NONCONVERGED


def _load_model(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None
    kind = d.get("model")
    if kind == "dpm":
        return dpm_em.model_from_dict(d)
    if kind == "lc":
        return lc_em.model_from_dict(d)
    if kind == "mnl":
        spec = UtilitySpec.from_dict(d["spec"])
        from .mnl import ParamVector, Transform
        c = d["coefficients"]
        beta = ParamVector([c["values"][n] for n in spec.names],
                           [Transform.from_label(c["transforms"][n]) for n in spec.names])
        return evaluate.MNLModel(spec, beta, d["loglik"], d["converged"])
    raise DataError(f"{path}: unknown model type {kind!r}")


def cmd_summarize(s: dict) -> int:
    if not s.get("model_json"):
        raise UsageError("no model given (--model-json)")
    model = _load_model(s["model_json"])
    out = output_dir(s)
    stem = Path(s["model_json"]).stem
    if model.spec.cost_index is None:
        raise UsageError("summaries need a cost attribute")
    evaluate.write_csv(evaluate.summarize_wtp(model), out / f"{stem}_wtp_summary.csv")
    mix, names = evaluate.implicit_values(model)
    for j, name in enumerate(names):
        evaluate.write_csv(evaluate.export_ecdf(mix.marginal(j)), out / f"{stem}_ecdf_{name}.csv")
    rng = np.random.default_rng(s["seed"])
    draws = evaluate.sample_mixture(mix, s["draws"], rng)
    evaluate.write_csv(pd.DataFrame(draws, columns=names), out / f"{stem}_draws.csv")
    h, n = s["bandwidth"], s["grid_points"]
    grids = [np.linspace(draws[:, j].min() - 3 * h, draws[:, j].max() + 3 * h, n)
             for j in range(len(names))]
    for j, name in enumerate(names):
        evaluate.write_csv(evaluate.kde_frame(draws[:, j], grids[j], h, (name,)),
                           out / f"{stem}_kde_{name}.csv")
    if len(names) >= 2:
        evaluate.write_csv(evaluate.kde_frame(draws[:, :2], (grids[0], grids[1]), h, names[:2]),
                           out / f"{stem}_kde_{names[0]}_{names[1]}.csv")
    return EXIT_OK


def dp_demo_truncation(alpha: float, residual: float = DP_DEMO_RESIDUAL, floor: int = 150) -> int:
    """Smallest K >= floor whose expected residual stick (a/(1+a))^(K-1) is below `residual`."""
    r = math.log(alpha) - math.log1p(alpha)
    return max(floor, 1 + math.ceil(math.log(residual) / r))


def cmd_dp_demo(s: dict) -> int:
    out = output_dir(s)
    lo, hi = s["bin_range"]
    edges = np.linspace(lo, hi, s["bins"] + 1)
    ss = np.random.SeedSequence(s["seed"])
    rows = []
    for alpha, child in zip(s["alphas"], ss.spawn(len(s["alphas"]))):
        rng = np.random.default_rng(child)
        K = dp_demo_truncation(alpha)
        draws = sample_stick_dp(alpha, lambda size, r: r.standard_normal(size), K, s["draws"], rng)
        counts, _ = np.histogram(np.clip(draws, lo, hi), edges)
        df = pd.DataFrame({"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts})
        evaluate.write_csv(df, out / f"dp_demo_alpha_{alpha:g}.csv")
        rows.append({"alpha": alpha, "truncation": K, "draws": s["draws"],
                     "distinct_atoms": int(len(np.unique(draws)))})
    evaluate.write_csv(pd.DataFrame(rows), out / "dp_demo_summary.csv")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="long-format choice CSV")
    p.add_argument("--space", choices=["wtp", "preference"])
    p.add_argument("--model", choices=["mnl", "lc", "dpm"])
    p.add_argument("--truncation", type=int, help="DPM truncation level K (default 150)")
    p.add_argument("--k", type=int, help="fixed number of LC classes")
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int)
    p.add_argument("--alpha-shape", type=float)
    p.add_argument("--alpha-scale", type=float)
    p.add_argument("--prior-scale", type=float)
    p.add_argument("--rel-tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--n-starts", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--output-dir", help=f"defaults to ${OUTPUT_DIR_ENV} or the working directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dpmnl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a Monte Carlo dataset")
    p.add_argument("--experiment", choices=list(simgen.EXPERIMENTS))
    p.add_argument("--n", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--j", type=int)
    p.set_defaults(func=cmd_simulate, defaults={"seed": 0, "n": 2000, "t": 8, "j": 3,
                                                "experiment": None})

    p = sub.add_parser("estimate", parents=[common], help="fit an MNL, LC-MNL or DPM-MNL model")
    _model_flags(p)
    p.add_argument("--scale-covariates", action="store_true", default=None,
                   help="rescale attributes by powers of ten before fitting")
    p.set_defaults(func=cmd_estimate, defaults={**MODEL_DEFAULTS, "model": "dpm"})

    p = sub.add_parser("crossval", parents=[common], help="k-fold predictive log-likelihood")
    _model_flags(p)
    p.add_argument("--folds", type=int)
    p.set_defaults(func=cmd_crossval, defaults={**MODEL_DEFAULTS, "model": "dpm", "folds": 10})

    p = sub.add_parser("summarize", parents=[common], help="WTP tables, ECDFs, draws and KDEs")
    p.add_argument("--model-json")
    p.add_argument("--draws", type=int)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--grid-points", type=int)
    p.set_defaults(func=cmd_summarize, defaults={"seed": 0, "draws": 2000,
                                                 "bandwidth": evaluate.DEFAULT_BANDWIDTH,
                                                 "grid_points": 101})

    p = sub.add_parser("dp-demo", parents=[common], help="histograms of DP draws")
    p.add_argument("--alphas", type=lambda v: [float(x) for x in v.split(",")],
                   help="comma-separated concentration values")
    p.add_argument("--draws", type=int)
    p.add_argument("--bins", type=int)
    p.set_defaults(func=cmd_dp_demo, defaults={"seed": 0, "alphas": [1.0, 10.0, 100.0, 1000.0],
                                               "draws": 1000, "bins": 80,
                                               "bin_range": [-4.0, 4.0]})
    return parser


def _check(s: dict, command: str) -> None:
    if command == "simulate" and s["experiment"] is None:
        raise UsageError("--experiment is required")
    for key in ("n", "t", "j", "draws", "bins", "grid_points", "truncation", "max_iter",
                "n_starts", "folds", "threads", "k_min", "k_max"):
        if key in s and s[key] is not None and s[key] < 1:
            raise UsageError(f"{key.replace('_', '-')} must be positive")
    if "alphas" in s and any(not a > 0 for a in s["alphas"]):
        raise UsageError("concentration values must be positive")
    if s.get("k") is not None and s["k"] < 1:
        raise UsageError("k must be positive")
    if "k_min" in s and s["k_min"] > s["k_max"]:
        raise UsageError("k-min exceeds k-max")
    for key in ("bandwidth", "rel_tol", "prior_scale", "alpha_shape", "alpha_scale"):
        if key in s and not s[key] > 0:
            raise UsageError(f"{key.replace('_', '-')} must be positive")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    defaults = args.defaults
    del args.defaults
    try:
        config = load_config(args.config, args.command)
        settings = merge(args, config, defaults)
        _check(settings, args.command)
        return args.func(settings)
    except UsageError as exc:
        print(f"dpmnl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"dpmnl {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
