"""Command-line interface: ``clusterate <command> [options]``.

Commands
--------
analyze     estimates, standard errors and intervals for observed data
simulate    Monte Carlo study of one simulation configuration
r2lab       treatment-covariate R^2 study over a design grid
exact       exact expectations and ratio bias by enumeration
conditions  finite-population regularity diagnostics

Exit codes: 0 success, 2 input error, 3 model error, 4 infeasible.
"""

from __future__ import annotations

import argparse
import os
import sys


from . import __version__
from ._io import provenance, render
from .asymptotics import condition_report
from .bias_exact import exact_expectation, hartley_bias
from .estimators import schedule_estimands, schedule_gamma
from .exceptions import ClusterATEError, InputError
from .population import ingest_units, observed_assignment, replicate, without_covariates
from .randomize import DEFAULT_CAP
from .simlab import load_config, run_study, r2_grid_study
from .variance import (
    confidence_interval,
    crse_variance,
    design_variance_block,
    design_variance_pooled,
)
from .wls import ModelSpec, build_design, fit_wls

ANALYZE_COLUMNS = ["effect", "estimate", "method", "se", "df", "g", "qstar", "vstar", "ci_low", "ci_high"]


def _workers_default():
    env = os.environ.get("CLUSTERATE_WORKERS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise InputError(f"CLUSTERATE_WORKERS must be an integer, got {env!r}") from None


def _qstar(text):
    if text in ("weight", "cluster"):
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("qstar must be 'weight', 'cluster' or a number") from None


def _float_list(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _int_list(text):
    return [int(t) for t in text.split(",") if t.strip()]


def _add_output(p):
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--out", help="also write the output to this file")


def _add_input(p):
    p.add_argument("--input", required=True, help="delimited unit-level data with a header row")
    p.add_argument("--sep", choices=("comma", "tab"), default="comma")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterate", description="Design-based estimation for blocked cluster-randomized experiments.")
    parser.add_argument("--version", action="version", version=f"clusterate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate effects from observed data")
    _add_input(a)
    a.add_argument("--model", choices=[m.value for m in ModelSpec], default="interacted")
    a.add_argument("--variance", choices=("design", "crse", "both"), default="both")
    a.add_argument("--g", type=float, default=None, help="CRSE small-sample factor (default G/(G-1))")
    a.add_argument("--qstar", type=_qstar, default="weight")
    a.add_argument("--df-rule", choices=("satterthwaite", "min"), default="satterthwaite")
    a.add_argument("--level", type=float, default=0.95)
    a.add_argument("--seed", type=int, default=None, help="recorded in the provenance header only")
    _add_output(a)

    s = sub.add_parser("simulate", help="Monte Carlo study of one configuration")
    s.add_argument("--config", help="key = value configuration file")
    s.add_argument("--seed", type=int, required=True)
    for name, typ in (("v", int), ("m", int), ("h", int), ("draws", int), ("repeats", int)):
        s.add_argument(f"--{name}", type=typ)
    for name in ("rho-x", "r", "p", "tau", "beta-x", "outcome-icc", "effect-sd", "noise-sd", "g", "level"):
        s.add_argument(f"--{name}", type=float)
    s.add_argument("--n-range", type=_int_list)
    s.add_argument("--weighting", choices=("unit", "cluster"))
    s.add_argument("--effect-dist", choices=("normal", "exponential", "lognormal"))
    s.add_argument("--model", choices=[m.value for m in ModelSpec])
    s.add_argument("--variance", choices=("design", "crse", "both"))
    s.add_argument("--qstar", choices=("weight", "cluster"))
    s.add_argument("--workers", type=int, default=None)
    _add_output(s)

    r = sub.add_parser("r2lab", help="treatment-covariate R^2 over a design grid")
    r.add_argument("--config", help="key = value configuration file for the base design")
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--v", type=_int_list, default=[2, 5, 10])
    r.add_argument("--rho-x", type=_float_list, default=[0.0, 0.4, 0.8])
    r.add_argument("--m", type=_int_list, default=[20, 40, 60])
    r.add_argument("--p", type=float)
    r.add_argument("--draws", type=int)
    r.add_argument("--repeats", type=int)
    r.add_argument("--workers", type=int, default=None)
    _add_output(r)

    e = sub.add_parser("exact", help="exact expectation and ratio bias by enumeration")
    _add_input(e)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--p", type=float, default=0.5)
    e.add_argument("--block", help="block id (default: every block)")
    e.add_argument("--cap", type=int, default=DEFAULT_CAP)
    e.add_argument("--workers", type=int, default=None)
    _add_output(e)

    c = sub.add_parser("conditions", help="finite-population regularity diagnostics")
    _add_input(c)
    c.add_argument("--p", type=float, default=0.5)
    c.add_argument("--model", choices=[m.value for m in ModelSpec], default="none")
    c.add_argument("--replicate", type=int, default=1)
    c.add_argument("--seed", type=int, default=None, help="recorded in the provenance header only")
    _add_output(c)
    return parser


def _emit(args, columns, rows, config):
    text = render(columns, rows, args.format, provenance(args.seed, config))
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _load(args):
    return ingest_units(args.input, delimiter="\t" if args.sep == "tab" else ",")


def _variance_rows(name, estimate, reports, level):
    rows = []
    for vr in reports:
        lo, hi = confidence_interval(estimate, vr, level)
        rows.append(
            {
                "effect": name,
                "estimate": float(estimate),
                "method": vr.method,
                "se": vr.se,
                "df": vr.df,
                "g": vr.correction,
                "qstar": vr.qstar,
                "vstar": vr.vstar,
                "ci_low": lo,
                "ci_high": hi,
            }
        )
    return rows


def cmd_analyze(args):
    pop = _load(args)
    if pop.mode != "observed":
        raise InputError("analyze needs observed outcomes: a 'y' column and a 'T' column")
    model = ModelSpec.parse(args.model)
    if model is ModelSpec.NO_COVARIATES:
        pop = without_covariates(pop)
    asg = observed_assignment(pop)
    want_design = args.variance in ("design", "both")
    want_crse = args.variance in ("crse", "both")
    rows = []
    if model is not ModelSpec.POOLED:
        fit = fit_wls(build_design(pop, asg, model))
        crse = crse_variance(fit, args.g) if want_crse else {}
        for b, bid in enumerate(pop.block_ids):
            label = fit.labels[b]
            reps = []
            if want_design:
                reps.append(design_variance_block(pop, asg, fit, b, args.qstar, args.df_rule))
            if want_crse:
                reps.append(crse[label])
            rows += _variance_rows(label, fit.coefficients[b], reps, args.level)
    if model is ModelSpec.POOLED or pop.h > 1:
        fit = fit_wls(build_design(pop, asg, ModelSpec.POOLED))
        reps = []
        if want_design:
            reps.append(design_variance_pooled(pop, asg, fit, args.df_rule))
        if want_crse:
            reps.append(crse_variance(fit, args.g)["tau"])
        rows += _variance_rows("tau", fit["tau"], reps, args.level)
    config = {k: getattr(args, k) for k in ("model", "variance", "g", "qstar", "df_rule", "level")}
    config["input"] = os.path.basename(args.input)
    _emit(args, ANALYZE_COLUMNS, rows, config)


def _overrides(args, names):
    out = {}
    for name in names:
        val = getattr(args, name, None)
        if val is not None:
            out[name] = tuple(val) if name == "n_range" else val
    return out


SIM_FIELDS = (
    "v", "m", "h", "draws", "repeats", "rho_x", "r", "p", "tau", "beta_x", "outcome_icc",
    "effect_sd", "noise_sd", "g", "level", "n_range", "weighting", "effect_dist", "model",
    "variance", "qstar",
)


def cmd_simulate(args):
    cfg = load_config(args.config, seed=args.seed, **_overrides(args, SIM_FIELDS))
    workers = args.workers if args.workers is not None else _workers_default()
    summary = run_study(cfg, workers=workers)
    rows = [{"name": f"config.{k}", "value": v if not isinstance(v, list) else " ".join(map(str, v))} for k, v in cfg.to_dict().items()]
    rows += [{"name": k, "value": v} for k, v in summary.rows()]
    _emit(args, ["name", "value"], rows, cfg.to_dict())


def cmd_r2lab(args):
    base = load_config(args.config, seed=args.seed, **_overrides(args, ("p", "draws", "repeats")))
    workers = args.workers if args.workers is not None else _workers_default()
    cells = r2_grid_study(args.v, args.rho_x, args.m, base, workers)
    rows = []
    for c in cells:
        rec = c.as_record()
        rec["gap"] = c.mean_r2_txb - c.mean_r2_tx
        rows.append(rec)
    columns = ["v", "rho_x", "m", "mean_r2_tx", "mean_r2_txb", "approx_r2_tx", "approx_r2_txb", "n_star", "gap", "min_gap"]
    config = base.to_dict() | {"grid_v": args.v, "grid_rho_x": args.rho_x, "grid_m": args.m}
    _emit(args, columns, rows, config)


def _block_indices(pop, block):
    if block is None:
        return list(range(pop.h))
    if block not in pop.block_ids:
        raise InputError(f"unknown block {block!r}")
    return [pop.block_ids.index(block)]


def cmd_exact(args):
    pop = _load(args)
    pop.require_schedule("exact")
    workers = args.workers if args.workers is not None else _workers_default()
    est = schedule_estimands(pop, args.p)
    rows = []
    for b in _block_indices(pop, args.block):
        e = exact_expectation(pop, "block_ate", args.p, block=b, cap=args.cap, workers=workers)
        hb = hartley_bias(pop, b, args.p, cap=args.cap)
        bias = e - float(est.block[b])
        rows.append(
            {
                "block": pop.block_ids[b],
                "assignments": hb.assignments,
                "expectation": e,
                "estimand": float(est.block[b]),
                "exact_bias": bias,
                "hartley_treated": hb.treated,
                "hartley_control": hb.control,
                "hartley_total": hb.total,
                "residual": abs(hb.total - bias),
            }
        )
    columns = list(rows[0])
    config = {"input": os.path.basename(args.input), "p": args.p, "block": args.block, "cap": args.cap}
    _emit(args, columns, rows, config)


def cmd_conditions(args):
    pop = _load(args)
    pop.require_schedule("conditions")
    if args.replicate < 1:
        raise InputError("--replicate must be >= 1")
    pop = replicate(pop, args.replicate)
    model = ModelSpec.parse(args.model)
    gamma = None if model is ModelSpec.NO_COVARIATES or pop.v == 0 else schedule_gamma(pop, args.p, model)
    rows = list(condition_report(pop, args.p, gamma).rows())
    config = {"input": os.path.basename(args.input), "p": args.p, "model": args.model, "replicate": args.replicate}
    _emit(args, list(rows[0]), rows, config)


COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "r2lab": cmd_r2lab,
    "exact": cmd_exact,
    "conditions": cmd_conditions,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ClusterATEError as exc:
        print(f"clusterate: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"clusterate: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
