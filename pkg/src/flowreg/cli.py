"""Command-line entry point for reproducible runs.

Subcommands: generate-traces, fit, laplace, evaluate, diagnose, benchmark.
Runs are driven by an optional JSON config file plus flag overrides; every
artifact embeds the fully resolved configuration and seed, so rerunning with
the same config reproduces outputs bit-exactly. Exit codes: 0 success,
1 usage error, 2 numeric/validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, FlowRegressionError
from .flow import FlowConfig, FlowModel
from .laplace import laplace_from_traces
from .metrics import compute_report, export_corner_data, psis_khat
from .optimize import FitOptions, fit_flow_regression
from .regression import LikelihoodConfig, NoiseShapingConfig
from .spaces import ParameterSpace, from_inference, log_abs_det_jacobian
from .targets import available_targets, get_target, ground_truth
from .traces import build_dataset, generate_training_set, read_trace, write_trace

logger = logging.getLogger(__name__)

N_EVAL_SAMPLES = 100_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration handling

_TOP_KEYS = {"target", "trace", "noise_std", "space", "flow", "likelihood", "fit",
             "traces", "seed", "outdir"}
_FLOW_KEYS = {"n_layers", "hidden_width", "max_scale", "max_shift", "prior_std"}
_LIKE_KEYS = {"kind", "shaping_enabled", "slope", "start_gap", "cap_gap"}
_FIT_KEYS = {"t_end", "t_max", "lbfgs_max_iters", "lbfgs_max_fevals", "grad_tol",
             "loss_window_tol", "loss_window", "history", "use_flow_prior"}
_TRACES_KEYS = {"budget_multiplier", "n_runs"}
_SPACE_KEYS = {"lower", "upper", "plausible_lo", "plausible_hi"}


def _check_keys(doc: dict, allowed: set, context: str):
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(
            f"unknown config key(s) in {context}: {', '.join(sorted(unknown))}"
        )


def load_config(path: str | None) -> dict:
    cfg = {
        "target": None,
        "trace": None,
        "noise_std": 0.0,
        "space": None,
        "flow": {},
        "likelihood": {},
        "fit": {},
        "traces": {},
        "seed": 0,
        "outdir": None,
    }
    if path is None:
        return cfg
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    _check_keys(doc, _TOP_KEYS, "config root")
    for key, allowed in (("flow", _FLOW_KEYS), ("likelihood", _LIKE_KEYS),
                         ("fit", _FIT_KEYS), ("traces", _TRACES_KEYS)):
        if key in doc and doc[key] is not None:
            _check_keys(doc[key], allowed, f"config section {key!r}")
    if doc.get("space") is not None:
        _check_keys(doc["space"], _SPACE_KEYS, "config section 'space'")
    for key in _TOP_KEYS:
        if key in doc and doc[key] is not None:
            cfg[key] = doc[key]
    return cfg


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "target", None) is not None:
        cfg["target"] = args.target
    if getattr(args, "trace", None) is not None:
        cfg["trace"] = args.trace
    if getattr(args, "noise_std", None) is not None:
        cfg["noise_std"] = args.noise_std
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg["outdir"] = args.out
    if getattr(args, "budget_multiplier", None) is not None:
        cfg["traces"]["budget_multiplier"] = args.budget_multiplier
    if getattr(args, "n_runs", None) is not None:
        cfg["traces"]["n_runs"] = args.n_runs
    if getattr(args, "likelihood", None) is not None:
        cfg["likelihood"]["kind"] = args.likelihood
    if getattr(args, "no_noise_shaping", False):
        cfg["likelihood"]["shaping_enabled"] = False
    if getattr(args, "no_flow_prior", False):
        cfg["fit"]["use_flow_prior"] = False
    if getattr(args, "t_end", None) is not None:
        cfg["fit"]["t_end"] = args.t_end
    return cfg


def _make_flow_config(cfg: dict, dim: int) -> FlowConfig:
    return FlowConfig(dim=dim, **cfg["flow"])


def _make_likelihood(cfg: dict, dim: int) -> LikelihoodConfig:
    like = cfg["likelihood"]
    shaping = NoiseShapingConfig(
        slope=like.get("slope", 0.05),
        start_gap=like.get("start_gap", 10.0 * dim),
        cap_gap=like.get("cap_gap", 50.0 * dim),
    )
    return LikelihoodConfig(
        kind=like.get("kind", "tobit"),
        shaping=shaping,
        shaping_enabled=like.get("shaping_enabled", True),
    )


def _make_fit_options(cfg: dict) -> tuple[FitOptions, bool]:
    fit = dict(cfg["fit"])
    use_prior = fit.pop("use_flow_prior", True)
    return FitOptions(seed=cfg["seed"], **fit), bool(use_prior)


def _resolved_doc(cfg: dict, space: ParameterSpace, flow_cfg: FlowConfig,
                  likelihood: LikelihoodConfig, options: FitOptions, use_prior: bool) -> dict:
    return {
        "target": cfg["target"],
        "trace": cfg["trace"],
        "noise_std": cfg["noise_std"],
        "space": space.to_dict(),
        "flow": flow_cfg.to_dict(),
        "likelihood": {
            "kind": likelihood.kind,
            "shaping_enabled": likelihood.shaping_enabled,
            "slope": likelihood.shaping.slope,
            "start_gap": likelihood.shaping.start_gap,
            "cap_gap": likelihood.shaping.cap_gap,
        },
        "fit": {
            "t_end": options.t_end,
            "t_max": options.t_max,
            "lbfgs_max_iters": options.lbfgs_max_iters,
            "lbfgs_max_fevals": options.lbfgs_max_fevals,
            "grad_tol": options.grad_tol,
            "loss_window_tol": options.loss_window_tol,
            "loss_window": options.loss_window,
            "history": options.history,
            "use_flow_prior": use_prior,
        },
        "traces": {
            "budget_multiplier": cfg["traces"].get("budget_multiplier", 3000.0),
            "n_runs": cfg["traces"].get("n_runs", 10),
        },
        "seed": cfg["seed"],
    }


def _outdir(cfg: dict) -> Path:
    if not cfg.get("outdir"):
        raise ConfigurationError("an output location is required (--out or config 'outdir')")
    path = Path(cfg["outdir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _json_dump(doc: dict, path: Path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# pipeline pieces shared by subcommands


def _generate_records(cfg: dict, target):
    traces_cfg = cfg["traces"]
    multiplier = traces_cfg.get("budget_multiplier", 3000.0)
    n_runs = traces_cfg.get("n_runs", 10)
    budget = int(round(multiplier * target.dim))
    return generate_training_set(
        target, total_budget=budget, n_runs=n_runs, seed=cfg["seed"]
    )


def _fit_from_config(cfg: dict):
    """Resolve the data source, fit, and return (result, space, resolved_doc)."""
    has_target = bool(cfg["target"])
    has_trace = bool(cfg["trace"])
    if has_target == has_trace:
        raise ConfigurationError("exactly one of 'target' and 'trace' must be the data source")
    if has_trace:
        trace = read_trace(cfg["trace"])
        space = ParameterSpace.from_dict(cfg["space"]) if cfg["space"] else trace.space
        if space is None:
            raise ConfigurationError("trace file has no space metadata; supply 'space' in config")
        records = trace.records
    else:
        target = get_target(cfg["target"], cfg["noise_std"], noise_seed=cfg["seed"])
        space = ParameterSpace.from_dict(cfg["space"]) if cfg["space"] else target.space
        records = _generate_records(cfg, target)
    dataset = build_dataset(records, space)
    dim = space.dim
    flow_cfg = _make_flow_config(cfg, dim)
    likelihood = _make_likelihood(cfg, dim)
    options, use_prior = _make_fit_options(cfg)
    resolved = _resolved_doc(cfg, space, flow_cfg, likelihood, options, use_prior)
    result = fit_flow_regression(
        dataset, flow_config=flow_cfg, likelihood=likelihood,
        options=options, use_flow_prior=use_prior,
    )
    return result, space, resolved, records


def _original_space_flow_samples(flow, space, n, seed):
    z = flow.sample(n, np.random.default_rng(seed))
    return from_inference(space, z)


def _evaluate_fit(target, flow, space, log_norm_constant, seed):
    truth = ground_truth(target)
    root = np.random.SeedSequence(seed)
    flow_seed, truth_seed = root.spawn(2)
    approx = _original_space_flow_samples(flow, space, N_EVAL_SAMPLES, flow_seed)
    true_samples = truth.sample(N_EVAL_SAMPLES, truth_seed)
    return compute_report(approx, true_samples, log_norm_constant, truth.log_norm)


def _print_report(report):
    doc = report.to_dict()
    for name in ("delta_lml", "mmtv", "gskl"):
        flag = "pass" if doc["passed"][name] else "FAIL"
        print(f"{name:<10} {doc[name]:<12.4g} threshold {doc['thresholds'][name]:<8.4g} {flag}")
    print(f"overall: {'pass' if report.passed else 'FAIL'}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_traces(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if not cfg["target"]:
        raise ConfigurationError("generate-traces requires --target")
    target = get_target(cfg["target"], cfg["noise_std"], noise_seed=cfg["seed"])
    records = _generate_records(cfg, target)
    meta = {"target": cfg["target"], "noise_std": cfg["noise_std"], "seed": cfg["seed"],
            "traces": {"budget_multiplier": cfg["traces"].get("budget_multiplier", 3000.0),
                       "n_runs": cfg["traces"].get("n_runs", 10)}}
    write_trace(args.out, records, target.space, meta=meta)
    print(f"wrote {len(records)} evaluations to {args.out}")
    return 0


def cmd_fit(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    result, space, resolved, _ = _fit_from_config(cfg)
    out = _outdir(cfg)
    result.flow.save(
        out / "flow.json",
        space=space,
        extra={
            "log_norm_constant": result.log_norm_constant,
            "termination": result.termination,
            "run_config": resolved,
        },
    )
    with open(out / "fit_trace.csv", "w") as fh:
        fh.write("# config " + json.dumps(resolved) + "\n")
        fh.write(result.trace_csv())
    print(f"log_norm_constant {result.log_norm_constant:.6g} ({result.termination}); "
          f"artifacts in {out}")
    return 0


def cmd_laplace(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if not cfg["target"] or not cfg["trace"]:
        raise ConfigurationError("laplace requires --target and --trace")
    target = get_target(cfg["target"], cfg["noise_std"], noise_seed=cfg["seed"])
    trace = read_trace(cfg["trace"])
    space = trace.space or target.space
    result = laplace_from_traces(target, trace.records, space=space, seed=cfg["seed"])
    out = _outdir(cfg)
    doc = {
        "mode": result.mode.tolist(),
        "cov": result.cov.tolist(),
        "log_norm_constant": result.log_norm,
        "target": cfg["target"],
        "noise_std": cfg["noise_std"],
        "seed": cfg["seed"],
    }
    if target.ground_truth is not None:
        truth = ground_truth(target)
        root = np.random.SeedSequence(cfg["seed"])
        ours, theirs = root.spawn(2)
        approx = from_inference(space, result.sample(N_EVAL_SAMPLES, ours))
        report = compute_report(
            approx, truth.sample(N_EVAL_SAMPLES, theirs), result.log_norm, truth.log_norm
        )
        doc["metrics"] = report.to_dict()
        _print_report(report)
    _json_dump(doc, out / "laplace.json")
    print(f"laplace log_norm_constant {result.log_norm:.6g}; artifacts in {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if not cfg["target"]:
        raise ConfigurationError("evaluate requires --target for the ground truth")
    flow, space, extra = _load_flow(args.flow)
    target = get_target(cfg["target"])
    report = _evaluate_fit(target, flow, space, extra["log_norm_constant"], cfg["seed"])
    out = _outdir(cfg)
    _json_dump({"metrics": report.to_dict(), "flow_file": str(args.flow),
                "target": cfg["target"], "seed": cfg["seed"]}, out / "metrics.json")
    _print_report(report)
    return 0


def cmd_diagnose(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if not cfg["target"]:
        raise ConfigurationError("diagnose requires --target")
    flow, space, extra = _load_flow(args.flow)
    target = get_target(cfg["target"])
    if target.noise > 0:
        raise ConfigurationError("the tail diagnostic needs exact (noiseless) evaluations")

    def log_density_inf(z):
        return target.log_density(from_inference(space, z)) + log_abs_det_jacobian(space, z)

    psis = psis_khat(flow, log_density_inf, args.n_psis, cfg["seed"])
    out = _outdir(cfg)
    doc = {"psis": psis.to_dict(), "target": cfg["target"], "seed": cfg["seed"],
           "flow_file": str(args.flow)}
    if cfg["trace"]:
        trace = read_trace(cfg["trace"])
        train_x = np.array([r.x for r in trace.records])
        samples = _original_space_flow_samples(flow, space, args.n_corner, cfg["seed"])
        score = export_corner_data(samples, train_x, out / "corner.csv",
                                   meta={"target": cfg["target"], "seed": cfg["seed"]})
        doc["hallucination_score"] = score
        print(f"hallucination score {score:.4f}")
    _json_dump(doc, out / "diagnostics.json")
    status = "good" if psis.good else "POOR"
    print(f"psis khat {psis.khat:.4f} ({status}, n={psis.n_samples})")
    return 0


def bootstrap_ci(values, n_boot: int = 10_000, seed: int = 0, level: float = 0.95):
    """Percentile bootstrap confidence interval for the median."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    medians = np.median(
        values[rng.integers(values.size, size=(n_boot, values.size))], axis=1
    )
    tail = 0.5 * (1.0 - level)
    return float(np.quantile(medians, tail)), float(np.quantile(medians, 1.0 - tail))


def cmd_benchmark(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if not cfg["target"]:
        raise ConfigurationError("benchmark requires --target")
    if args.seeds < 1:
        raise ConfigurationError("need at least one seed")
    per_seed = []
    for seed in range(args.seeds):
        run_cfg = json.loads(json.dumps(cfg))  # deep copy
        run_cfg["seed"] = seed
        run_cfg["trace"] = None
        logger.info("benchmark %s: seed %d/%d", cfg["target"], seed + 1, args.seeds)
        result, space, resolved, _ = _fit_from_config(run_cfg)
        target = get_target(cfg["target"])
        report = _evaluate_fit(target, result.flow, space, result.log_norm_constant, seed)
        per_seed.append({"seed": seed, "log_norm_constant": result.log_norm_constant,
                         "termination": result.termination, "metrics": report.to_dict()})
        logger.info(
            "seed %d: delta_lml=%.4g mmtv=%.4g gskl=%.4g", seed,
            report.delta_lml, report.mmtv, report.gskl,
        )
    table = {}
    print(f"target={cfg['target']} seeds={args.seeds} noise_std={cfg['noise_std']}")
    print(f"{'metric':<10}{'median':>12}{'ci95_lo':>12}{'ci95_hi':>12}{'threshold':>12}{'pass':>8}")
    thresholds = per_seed[0]["metrics"]["thresholds"]
    for name in ("delta_lml", "mmtv", "gskl"):
        values = [row["metrics"][name] for row in per_seed]
        median = float(np.median(values))
        lo, hi = bootstrap_ci(values)
        ok = median < thresholds[name]
        table[name] = {"median": median, "ci95": [lo, hi], "values": values,
                       "threshold": thresholds[name], "pass": ok}
        print(f"{name:<10}{median:>12.4g}{lo:>12.4g}{hi:>12.4g}"
              f"{thresholds[name]:>12.4g}{'pass' if ok else 'FAIL':>8}")
    if cfg.get("outdir"):
        out = _outdir(cfg)
        _json_dump({"target": cfg["target"], "noise_std": cfg["noise_std"],
                    "seeds": args.seeds, "config": cfg, "table": table,
                    "per_seed": per_seed}, out / "benchmark.json")
        print(f"artifacts in {out}")
    return 0


def _load_flow(path):
    flow, space = FlowModel.load(path)
    with open(path) as fh:
        doc = json.load(fh)
    if space is None:
        raise ConfigurationError(f"{path} does not embed a parameter space")
    if "log_norm_constant" not in doc:
        raise ConfigurationError(f"{path} does not embed a log_norm_constant")
    return flow, space, doc


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, need_out=False):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--seed", type=int, help="root seed (default 0)")
        p.add_argument("--out", required=need_out, help="output file or directory")

    p = sub.add_parser("generate-traces", help="run the built-in optimizer on a target")
    common(p, need_out=True)
    p.add_argument("--target", help=f"one of: {', '.join(available_targets())}")
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--budget-multiplier", type=float, dest="budget_multiplier")
    p.add_argument("--n-runs", type=int, dest="n_runs")
    p.set_defaults(func=cmd_generate_traces)

    p = sub.add_parser("fit", help="fit the flow regression model")
    common(p, need_out=True)
    p.add_argument("--trace", help="trace file as data source")
    p.add_argument("--target", help="target name as data source (traces generated on the fly)")
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--budget-multiplier", type=float, dest="budget_multiplier")
    p.add_argument("--n-runs", type=int, dest="n_runs")
    p.add_argument("--likelihood", choices=("tobit", "gaussian"))
    p.add_argument("--no-noise-shaping", action="store_true", dest="no_noise_shaping")
    p.add_argument("--no-flow-prior", action="store_true", dest="no_flow_prior")
    p.add_argument("--t-end", type=int, dest="t_end")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("laplace", help="Laplace baseline from a trace")
    common(p, need_out=True)
    p.add_argument("--target", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.set_defaults(func=cmd_laplace)

    p = sub.add_parser("evaluate", help="metrics of a fitted flow vs ground truth")
    common(p, need_out=True)
    p.add_argument("--flow", required=True, help="flow.json from `fit`")
    p.add_argument("--target", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="tail diagnostic and corner-data export")
    common(p, need_out=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--trace", help="trace file supplying training points for the corner export")
    p.add_argument("--n-psis", type=int, default=1000, dest="n_psis")
    p.add_argument("--n-corner", type=int, default=5000, dest="n_corner")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("benchmark", help="full pipeline for a target across seeds")
    common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--noise-std", type=float, dest="noise_std")
    p.add_argument("--budget-multiplier", type=float, dest="budget_multiplier")
    p.add_argument("--n-runs", type=int, dest="n_runs")
    p.add_argument("--likelihood", choices=("tobit", "gaussian"))
    p.add_argument("--no-noise-shaping", action="store_true", dest="no_noise_shaping")
    p.add_argument("--no-flow-prior", action="store_true", dest="no_flow_prior")
    p.add_argument("--t-end", type=int, dest="t_end")
    p.set_defaults(func=cmd_benchmark)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except FlowRegressionError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main():
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    sys.exit(dispatch())
