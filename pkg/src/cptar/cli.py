"""
Command-line interface: ``cptar {fit,forecast,simulate,select,convert}``.

Failures print ``{"code", "message", "context"}`` as JSON on stderr and exit
with a nonzero status.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import io
from .als import AlsConfig, FitError, als_fit
from .factor import TensorSeries, assemble_coef
from .lrs import LAMBDA_GRID, LrsConfig, lrs_fit
from .selection import (FittedModel, HoldoutPlan, forecast_metrics, holdout_select,
                        select_lrs)
from .simulation import (DgpSpec, NonStationaryError, draw_coefficients,
                         run_rate_experiment, simulate_series)

THREADS_ENV = "CPTAR_THREADS"
EXIT_USAGE, EXIT_INPUT, EXIT_FIT = 2, 3, 4

DESIGN_NAMES = {"vary-t": "vary_T", "vary-ranks": "vary_ranks",
                "vary-dims": "vary_dims", "vary-alpha": "vary_alpha"}


class CliError(Exception):
    def __init__(self, code, message, status=EXIT_INPUT, **context):
        super().__init__(message)
        self.code = code
        self.status = status
        self.context = context


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE, prog=self.prog)


def _default_threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _add_fit_flags(p, need_ranks=True):
    p.add_argument("--order", "-P", type=int, required=need_ranks)
    p.add_argument("--rank-y", type=int, required=need_ranks)
    p.add_argument("--rank-x", type=int, required=need_ranks)
    p.add_argument("--variant", choices=("lowrank", "lrs", "stacked"), default="lowrank")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha-l", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", type=int)


def build_parser():
    parser = _Parser(prog="cptar", description="CP-based low-rank tensor autoregression")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model to a series file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="model JSON path")
    p.add_argument("--report", help="fit report JSON (default: <output>.report.json)")
    p.add_argument("--config", help="flat TOML file with estimator settings")
    p.add_argument("--seed", type=int, required=True)
    _add_fit_flags(p)

    p = sub.add_parser("forecast", help="one-step forecasts with a fitted model")
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True, help="prediction series path")
    p.add_argument("--metrics", help="metrics JSON (default: <output>.metrics.json)")
    p.add_argument("--start", type=int, help="first predicted index (0-based, default P)")

    p = sub.add_parser("simulate", help="simulate a series or run a rate experiment")
    p.add_argument("--config", help="flat TOML file with DGP settings")
    p.add_argument("--output", required=True,
                   help="series path, or CSV prefix when --design is given")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--length", "-T", type=int, default=None)
    p.add_argument("--design", choices=sorted(DESIGN_NAMES))
    p.add_argument("--grid", help="comma-separated grid values for --design")
    p.add_argument("--replications", type=int)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--variant", choices=("lowrank", "lrs"), default="lowrank")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha-l", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", type=int)

    p = sub.add_parser("select", help="hold-out selection of (P, R_y, R_x[, lambda])")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="score table CSV")
    p.add_argument("--chosen", help="chosen configuration JSON (default: <output>.chosen.json)")
    p.add_argument("--config", help="flat TOML file with plan settings")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train-len", type=int)
    p.add_argument("--val-len", type=int)
    p.add_argument("--test-len", type=int, default=0)
    p.add_argument("--refit-every", type=int, default=1)
    p.add_argument("--grid-pmax", type=int, default=12)
    p.add_argument("--grid-rymax", type=int, default=12)
    p.add_argument("--grid-rxmax", type=int, default=12)
    p.add_argument("--lambda-grid", help="comma-separated lambda candidates (lrs)")
    p.add_argument("--joint", action="store_true",
                   help="lrs: search orders and lambda jointly instead of reusing the "
                        "low-rank orders")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--variant", choices=("lowrank", "lrs", "stacked"), default="lowrank")
    p.add_argument("--alpha-l", type=float)
    p.add_argument("--restarts", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", type=int)

    p = sub.add_parser("convert", help="CSV (one vec(Y_t) per row) to a series file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--dims", required=True, help="comma-separated tensor dims")
    return parser


def _read_config(path):
    return io.load_config(path) if path else {}


def _pick(args, cfg, flag, key, default=None):
    val = getattr(args, flag, None)
    if val is not None:
        return val
    return cfg.get(key, default)


def _als_config(args, cfg, seed):
    base = AlsConfig()
    return AlsConfig(
        max_iters=int(_pick(args, cfg, "max_iters", "max_iters", base.max_iters)),
        rel_tol=float(_pick(args, cfg, "tol", "rel_tol", base.rel_tol)),
        num_restarts=int(_pick(args, cfg, "restarts", "num_restarts", base.num_restarts)),
        rng_seed=seed)


def _read_series(path):
    try:
        return io.read_series(path)
    except OSError as exc:
        raise CliError("io_error", str(exc), path=path) from exc


def _sidecar(explicit, output, suffix):
    return explicit or f"{output}.{suffix}"


def cmd_fit(args):
    cfg = _read_config(args.config)
    series = _read_series(args.input)
    als_cfg = _als_config(args, cfg, args.seed)
    P, ry, rx = args.order, args.rank_y, args.rank_x
    meta = {"seed": args.seed, "variant": args.variant, "input": args.input,
            "als_config": dataclasses.asdict(als_cfg)}
    if args.variant == "lrs":
        lam = _pick(args, cfg, "lam", "lambda")
        if lam is None:
            raise CliError("missing_lambda", "--lambda is required for the lrs variant")
        lcfg = LrsConfig(lam=float(lam), alpha_L=_pick(args, cfg, "alpha_l", "alpha_L"),
                         als_config=als_cfg)
        lowrank, sparse, rep = lrs_fit(series, P, ry, rx, lcfg)
        meta["lambda"] = lcfg.lam
        meta["alpha_L"] = rep.alpha_L
    else:
        variant = "stacked_lag_mode" if args.variant == "stacked" else "ar_shared_lags"
        lowrank, rep = als_fit(series, P, ry, rx, als_cfg, variant=variant)
        sparse = None
    report = rep.to_dict()
    meta["final_loss"] = report.get("final_loss", (report.get("objective_trace") or [None])[-1])
    io.write_model(args.output, lowrank, sparse, meta)
    io.write_json(_sidecar(args.report, args.output, "report.json"), report)
    # Validate what was written.
    io.read_model(args.output)
    return 0


def cmd_forecast(args):
    series = _read_series(args.input)
    lowrank, sparse, _ = io.read_model(args.model)
    model = FittedModel(lowrank, sparse)
    P = model.lag_order
    start = P if args.start is None else args.start
    if not P <= start < len(series):
        raise CliError("bad_start", f"start must lie in [{P}, {len(series) - 1}]",
                       start=start, T=len(series))
    preds = np.stack([model.predict(series.lagged(t, P)) for t in range(start, len(series))])
    msfe, mafe = forecast_metrics(preds, series.data[start:])
    io.write_series(TensorSeries(preds), args.output)
    io.write_json(_sidecar(args.metrics, args.output, "metrics.json"), {
        "msfe": msfe, "mafe": mafe, "start": start, "steps": len(preds),
        "normalization": "per-entry mean over steps"})
    return 0


_DGP_KEYS = {f.name for f in dataclasses.fields(DgpSpec)}


def _dgp_spec(cfg, args):
    kw = {k: v for k, v in cfg.items() if k in _DGP_KEYS}
    if "dims" in kw:
        kw["dims"] = tuple(kw["dims"])
    if args.alpha_l is not None:
        kw["alpha_L"] = args.alpha_l
    kw["rng_seed"] = args.seed
    return DgpSpec(**kw)


def _parse_list(text, cast):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError("bad_list", f"cannot parse {text!r}: {exc}") from exc


def cmd_simulate(args):
    cfg = _read_config(args.config)
    spec = _dgp_spec(cfg, args)
    T = int(args.length or cfg.get("T", 500))
    if args.design is None:
        rng = np.random.default_rng(args.seed)
        lowrank, sparse = draw_coefficients(spec, rng)
        series = simulate_series(spec, lowrank, T, rng, sparse=sparse)
        series.meta["seed"] = args.seed
        io.write_series(series, args.output)
        truth = args.output + ".truth.json"
        io.write_model(truth, lowrank, sparse,
                       {"seed": args.seed, "spec": dataclasses.asdict(spec)})
        return 0
    design = DESIGN_NAMES[args.design]
    grid = _parse_list(args.grid, float) if args.grid else cfg.get("grid")
    if not grid:
        raise CliError("missing_grid", "--grid (or grid in the config) is required with --design")
    if design in ("vary_T", "vary_ranks", "vary_dims"):
        grid = [int(g) for g in grid]
    reps = int(args.replications or cfg.get("replications", 50))
    estimator = "lrs" if (args.variant == "lrs" or design == "vary_alpha") else "lowrank"
    lam = _pick(args, cfg, "lam", "lambda")
    diag = run_rate_experiment(design, spec, grid, reps, estimator=estimator, T=T,
                               als_config=_als_config(args, cfg, args.seed),
                               lam=None if lam is None else float(lam),
                               threads=args.threads)
    io.write_table(args.output + ".rows.csv", "rate_rows", diag.rows)
    io.write_table(args.output + ".summary.csv", "rate_summary", diag.summary_rows())
    io.write_json(args.output + ".diagnostics.json", {
        "design": design, "estimator": estimator, "correlation": diag.correlation,
        "slope": diag.slope, "intercept": diag.intercept, "replications": reps,
        "lambda": diag.lam or None, "seed": args.seed})
    return 0


def cmd_select(args):
    cfg = _read_config(args.config)
    series = _read_series(args.input)
    T = len(series)
    train = int(_pick(args, cfg, "train_len", "train_len", 0) or 0)
    val = int(_pick(args, cfg, "val_len", "val_len", 0) or 0)
    if not train:
        train = (T - args.test_len) * 8 // 9
    if not val:
        val = T - args.test_len - train
    lams = None
    if args.variant == "lrs":
        lams = tuple(_parse_list(args.lambda_grid, float)) if args.lambda_grid else LAMBDA_GRID
    plan = HoldoutPlan(train, val, args.test_len, args.grid_pmax, args.grid_rymax,
                       args.grid_rxmax, lams, args.refit_every)
    als_cfg = _als_config(args, cfg, args.seed)
    if args.variant == "lrs":
        res = select_lrs(series, plan, als_cfg, alpha_L=args.alpha_l, reuse=not args.joint,
                         threads=args.threads)
    else:
        res = holdout_select(series, plan, args.variant, als_cfg, threads=args.threads)
    io.write_table(args.output, "scores", res.scores)
    io.write_json(_sidecar(args.chosen, args.output, "chosen.json"), {
        "P": res.P, "R_y": res.R_y, "R_x": res.R_x, "lambda": res.lam,
        "variant": args.variant, "joint": bool(args.joint),
        "train_len": train, "val_len": val, "seed": args.seed})
    return 0


def cmd_convert(args):
    dims = _parse_list(args.dims, int)
    series = io.csv_to_series(args.input, dims)
    io.write_series(series, args.output)
    return 0


COMMANDS = {"fit": cmd_fit, "forecast": cmd_forecast, "simulate": cmd_simulate,
            "select": cmd_select, "convert": cmd_convert}


def _emit(code, message, context):
    json.dump({"code": code, "message": message, "context": context}, sys.stderr,
              default=str)
    sys.stderr.write("\n")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
        return COMMANDS[args.command](args)
    except CliError as exc:
        _emit(exc.code, str(exc), exc.context)
        return exc.status
    except io.FormatError as exc:
        _emit(exc.code, str(exc), exc.context)
        return EXIT_INPUT
    except (FitError, NonStationaryError) as exc:
        _emit("fit_failed", str(exc), {"type": type(exc).__name__})
        return EXIT_FIT
    except (ValueError, OSError, KeyError, TypeError) as exc:
        _emit("invalid_input", str(exc), {"type": type(exc).__name__})
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
