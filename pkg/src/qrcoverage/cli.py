"""Command-line interface.

Every subcommand writes a JSON document to stdout, or to ``--out`` as CSV or
JSON depending on the file extension.  Exit codes: 0 success, 2 usage error,
3 solver non-convergence, 4 data error.  Errors are also reported on stderr
as a one-line JSON object with a machine-readable ``code``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from .asymptotics import AsymptoticError, AsymptoticProblem, limiting_dual_law, solve_asymptotic
from .baselines import IntervalMethod, evaluate, interval_predict
from .calibrate import (
    DEFAULT_C_RANGE,
    CalibrationResult,
    calibrate_additive,
    calibrate_additive_ridge,
    calibrate_level,
    calibrate_level_ridge,
    default_lambda_grid,
)
from .conformal import BracketError, fixed_threshold, full_conformal_predict, quantile_dual_threshold
from .core import Dataset, DataError, FixedOffset, FreeIntercept, ProblemSpec, normalize, read_csv
from .experiments import ROW_FIELDS, Figure, run_figure
from .loo import loo_coverage_dual, loo_multiaccuracy
from .solver import ConvergenceError, SolverConfig, fit

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONVERGENCE = 3
EXIT_DATA = 4


class UsageError(Exception):
    """Invalid flag values detected after parsing."""


# --------------------------------------------------------------------------
# argument types


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


# --------------------------------------------------------------------------
# parser


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    """Append ``(default: ...)`` unless the help already names its default."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or any(action.default is v for v in (None, False, argparse.SUPPRESS)):
            return text
        return super()._get_help_string(action)


def _add_common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("output and execution")
    g.add_argument("--out", help="write results here; .csv or .json selects the format")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (default: logical cores, %(default)s here)")
    g.add_argument("--config", help="key=value file whose entries replace flag defaults")


def _add_solver(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--max-iterations", type=int, default=50_000, help="ADMM iteration cap")
    g.add_argument("--tolerance", type=float, default=1e-9, help="certificate tolerance")
    g.add_argument("--admm-rho", type=float, default=1.0, help="initial ADMM penalty")


def _add_data(p: argparse.ArgumentParser, required: bool = True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--csv", required=required, help="training CSV with a header row")
    g.add_argument("--response", required=required, help="response column name")
    g.add_argument("--features", type=_names, help="comma-separated feature columns (default: all others)")
    g.add_argument("--normalize", action="store_true", help="center and scale every column")


def _add_test(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("test points")
    g.add_argument("--x", type=_floats, help="one test feature vector, comma-separated")
    g.add_argument("--test-csv", help="CSV of test points with the training feature columns")


def _add_grid(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("ridge grid (lambda in n^-1 * {0, step, ..., top})")
    g.add_argument("--lambda-top", type=float, default=0.1, help="largest grid value times n")
    g.add_argument("--lambda-step", type=float, default=0.005, help="grid spacing times n")


def _add_c_range(p: argparse.ArgumentParser) -> None:
    p.add_argument("--c-lo", type=float, default=DEFAULT_C_RANGE[0], help="lower end of the offset range")
    p.add_argument("--c-hi", type=float, default=DEFAULT_C_RANGE[1], help="upper end of the offset range")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrcoverage",
        description="Quantile regression with dual-based coverage diagnostics and corrections.",
        formatter_class=_Formatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help_text, description=help_text, formatter_class=_Formatter)

    p = add("fit", "Fit one penalized quantile regression and report its certificate and LOO coverage.")
    _add_data(p)
    p.add_argument("--tau", type=float, default=0.9, help="quantile level")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="ridge level")
    p.add_argument("--offset", type=float, help="hold the intercept fixed at this value (default: free)")
    p.add_argument("--jitter", type=float, default=0.0, help="feature noise scale")
    _add_solver(p)
    _add_common(p)

    p = add("calibrate-level", "Tune the loss level so that LOO coverage matches tau.")
    _add_data(p)
    p.add_argument("--tau", type=float, default=0.9, help="target coverage")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="ridge level without --ridge")
    p.add_argument("--ridge", action="store_true", help="also select lambda from the grid")
    _add_grid(p)
    _add_solver(p)
    _add_common(p)

    p = add("calibrate-additive", "Tune a fixed offset so that LOO coverage matches tau.")
    _add_data(p)
    p.add_argument("--tau", type=float, default=0.9, help="target coverage")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="ridge level without --ridge")
    p.add_argument("--ridge", action="store_true", help="also select lambda from the grid")
    _add_c_range(p)
    _add_grid(p)
    _add_solver(p)
    _add_common(p)

    p = add("dual-threshold", "Dual-thresholded quantile predictions at test points.")
    _add_data(p)
    _add_test(p)
    p.add_argument("--tau", type=float, default=0.9, help="quantile level")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="ridge level")
    p.add_argument("--threshold", type=float,
                   help="dual threshold t (default: tau-quantile of the training duals)")
    p.add_argument("--randomized", action="store_true",
                   help="draw t uniformly from (-(1-tau), tau) per test point")
    p.add_argument("--seed", type=int, default=0, help="seed for --randomized")
    _add_solver(p)
    _add_common(p)

    p = add("conformal", "Full-conformal quantile predictions at test points.")
    _add_data(p)
    _add_test(p)
    p.add_argument("--tau", type=float, default=0.9, help="quantile level")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="ridge level")
    _add_solver(p)
    _add_common(p)

    p = add("cqr", "Split conformalized quantile regression intervals.")
    _add_data(p)
    _add_test(p)
    p.add_argument("--alpha", type=float, default=0.1, help="miscoverage level")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="ridge level")
    p.add_argument("--split-fraction", type=float, default=0.75, help="training share of the split")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    _add_solver(p)
    _add_common(p)

    p = add("simulate", "Run one figure protocol and emit per-trial rows and aggregates.")
    p.add_argument("--figure", required=True, choices=[f.value for f in Figure], help="figure protocol")
    p.add_argument("--n", type=int, help="training sample size (default: the figure's)")
    p.add_argument("--d", dest="dims", type=_ints, help="comma-separated dimensions (default: the figure's)")
    p.add_argument("--scaled-n", dest="scaled_ns", type=_ints,
                   help="comma-separated sample sizes at the fixed ratio d/n")
    p.add_argument("--ratio", type=float, help="d/n for --scaled-n (default 0.1)")
    p.add_argument("--trials", type=int, help="trials per point (default: the figure's)")
    p.add_argument("--n-test", type=int, help="test points per trial (default 2000)")
    p.add_argument("--n-test-dual", type=int, help="test points for dual-thresholding methods (default 100)")
    p.add_argument("--tau", type=float, help="quantile level (default 0.9)")
    p.add_argument("--alpha", type=float, help="miscoverage of two-sided intervals (default 0.1)")
    p.add_argument("--sigma", type=float, help="noise standard deviation (default 1)")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--methods", type=_names, help="comma-separated methods (fig7 only)")
    p.add_argument("--c-caps", type=_floats, help="comma-separated offset caps (fig4)")
    p.add_argument("--c-lo", type=float, default=DEFAULT_C_RANGE[0], help="lower end of the offset range")
    p.add_argument("--c-hi", type=float, default=DEFAULT_C_RANGE[1], help="upper end of the offset range")
    p.add_argument("--lambda-top", type=float, help="largest grid value times n (default 0.1)")
    p.add_argument("--lambda-step", type=float, help="grid spacing times n (default 0.005)")
    p.add_argument("--csv", help="real-data CSV for fig7 (default: synthetic data)")
    p.add_argument("--response", help="response column of --csv")
    _add_solver(p)
    _add_common(p)

    p = add("asymptotics", "Solve the limiting min-max program and report the limiting dual law.")
    p.add_argument("--gamma", type=float, required=True, help="aspect ratio d/n in (0, 2/pi)")
    p.add_argument("--tau", type=float, default=0.9, help="quantile level")
    p.add_argument("--sigma", type=float, default=1.0, help="noise standard deviation")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0,
                   help="ridge level on the scale of the finite fit divided by d")
    p.add_argument("--beta-second-moment", type=float, default=1.0, help="limit of ||beta||^2")
    p.add_argument("--quantiles", type=_floats, default=(0.1, 0.25, 0.5, 0.75, 0.9),
                   help="levels at which to report quantiles of the dual law")
    _add_common(p)

    p = add("evaluate", "Fit one interval method and score it on held-out data.")
    _add_data(p)
    p.add_argument("--test-csv", required=True, help="held-out CSV with the response column")
    p.add_argument("--method", required=True, choices=[m.value for m in IntervalMethod], help="interval method")
    p.add_argument("--alpha", type=float, default=0.1, help="miscoverage level")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="ridge level for QR, CQR and thresholding")
    p.add_argument("--split-fraction", type=float, default=0.75, help="training share for CQR")
    p.add_argument("--seed", type=int, default=0, help="seed for CQR and GCCRand")
    _add_c_range(p)
    _add_grid(p)
    _add_solver(p)
    _add_common(p)

    return parser


# --------------------------------------------------------------------------
# config overlay and validation


def _read_config(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for k, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{k}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str], args: argparse.Namespace):
    """Re-parse with config-file values as defaults; explicit flags still win."""
    entries = _read_config(args.config)
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in entries.items():
        action = actions.get(key)
        if action is None:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean")
            defaults[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type is not None else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r} must be one of {sorted(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    for action in sub._actions:
        # config values satisfy required flags
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise UsageError(message)


def _validate(args: argparse.Namespace) -> None:
    g = vars(args)
    _check(g.get("threads", 1) >= 1, "--threads must be >= 1")
    if "max_iterations" in g:
        _check(args.max_iterations >= 1, "--max-iterations must be >= 1")
        _check(args.tolerance > 0, "--tolerance must be > 0")
        _check(args.admm_rho > 0, "--admm-rho must be > 0")
    if g.get("tau") is not None:
        _check(0.0 < args.tau < 1.0, "--tau must lie in (0, 1)")
    if g.get("alpha") is not None:
        _check(0.0 < args.alpha < 1.0, "--alpha must lie in (0, 1)")
    if g.get("lam") is not None:
        _check(args.lam >= 0 and math.isfinite(args.lam), "--lambda must be finite and >= 0")
    if g.get("jitter") is not None:
        _check(args.jitter >= 0, "--jitter must be >= 0")
    if g.get("split_fraction") is not None:
        _check(0.0 < args.split_fraction < 1.0, "--split-fraction must lie in (0, 1)")
    if "c_lo" in g:
        _check(args.c_lo < args.c_hi, "--c-lo must be below --c-hi")
    for key in ("lambda_top", "lambda_step"):
        if g.get(key) is not None:
            _check(g[key] >= 0 if key == "lambda_top" else g[key] > 0, f"--{key.replace('_', '-')} out of range")
    if "x" in g and args.command != "evaluate":
        _check((args.x is None) != (args.test_csv is None), "give exactly one of --x and --test-csv")
    if args.command == "dual-threshold":
        _check(not (args.randomized and args.threshold is not None),
               "--threshold and --randomized are exclusive")
    if args.command == "simulate":
        for key in ("n", "trials", "n_test", "n_test_dual"):
            if g.get(key) is not None:
                _check(g[key] >= 1, f"--{key.replace('_', '-')} must be >= 1")
        if args.dims is not None:
            _check(len(args.dims) > 0 and min(args.dims) >= 1, "--d needs positive dimensions")
        if args.sigma is not None:
            _check(args.sigma > 0, "--sigma must be > 0")
        if args.csv is not None:
            _check(args.figure == Figure.FIG7.value, "--csv is only used by fig7")
            _check(args.response is not None, "--csv requires --response")
    if args.command == "asymptotics":
        _check(0.0 < args.gamma < 2.0 / math.pi, "--gamma must lie in (0, 2/pi)")
        _check(args.sigma > 0, "--sigma must be > 0")
        _check(args.beta_second_moment > 0, "--beta-second-moment must be > 0")
        _check(all(0.0 < q < 1.0 for q in args.quantiles), "--quantiles must lie in (0, 1)")
    out = g.get("out")
    if out is not None:
        _check(os.path.splitext(out)[1].lower() in (".csv", ".json"), "--out must end in .csv or .json")


# --------------------------------------------------------------------------
# helpers


def _solver_config(args) -> SolverConfig:
    return SolverConfig(max_iterations=args.max_iterations, tolerance=args.tolerance, admm_rho=args.admm_rho)


def _load(args) -> Dataset:
    data = read_csv(args.csv, args.response, args.features)
    return normalize(data) if args.normalize else data


def _test_features(args, data: Dataset) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Test matrix from ``--x`` or ``--test-csv``; responses when the CSV has them."""
    if args.x is not None:
        x = np.asarray(args.x, dtype=float)
        if x.size != data.d:
            raise DataError(f"--x has {x.size} values, expected {data.d}")
        return x.reshape(1, -1), None
    names = data.feature_names or ()
    with open(args.test_csv, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    has_y = args.response in header
    if has_y:
        test = read_csv(args.test_csv, args.response, list(names))
    else:
        # no response column: read the features under a dummy response name
        test = read_csv(args.test_csv, names[0], list(names)) if names else None
        if test is None:
            raise DataError("test CSV has no usable columns")
    X = test.X
    if args.normalize and data.normalization is not None:
        norm = data.normalization
        X = (X - norm.feature_mean) / norm.feature_scale
    y = None
    if has_y:
        y = test.y
        if args.normalize and data.normalization is not None:
            y = (y - data.normalization.response_mean) / data.normalization.response_scale
    return X, y


def _jsonable(v: Any) -> Any:
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (frozenset, set)):
        return sorted(_jsonable(x) for x in v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if hasattr(v, "value") and isinstance(getattr(v, "value"), str):
        return v.value
    return v


def _dumps(payload: Any) -> str:
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True)


def _csv_text(rows: Sequence[dict], fields: Optional[Sequence[str]] = None) -> str:
    fields = list(fields) if fields is not None else list(rows[0].keys()) if rows else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row.get(k)) for k in fields})
    return buf.getvalue()


def _cell(v: Any) -> str:
    v = _jsonable(v)
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ";".join(str(x) for x in v)
    return str(v)


def _kkt(cert) -> dict:
    return {
        "primal_residual": cert.primal_residual,
        "dual_residual": cert.dual_residual,
        "duality_gap_per_sample": cert.duality_gap_per_sample,
        "stationarity_norm": cert.stationarity_norm,
        "slackness_violation": cert.slackness_violation,
        "polished": cert.polished,
        "rank_deficient": cert.rank_deficient,
    }


def _calibration_dict(res: CalibrationResult) -> dict:
    return {
        "method": res.method.value,
        "tau": res.tau,
        "loo_coverage": res.loo_coverage,
        "on_target": res.on_target,
        "tau_adj": res.tau_adj,
        "c": res.c,
        "lambda": res.lam,
        "loo_multiaccuracy": res.loo_multiaccuracy,
        "flags": res.flags,
        "intercept": res.final_fit.intercept,
        "beta": res.final_fit.beta,
        "search_trace": [list(t) for t in res.search_trace],
        "multiaccuracy_trace": [list(t) for t in res.multiaccuracy_trace],
    }


# --------------------------------------------------------------------------
# commands; each returns (json payload, csv rows)


def cmd_fit(args):
    data = _load(args)
    intercept = FixedOffset(args.offset) if args.offset is not None else FreeIntercept()
    spec = ProblemSpec(args.tau, args.lam, intercept, jitter=args.jitter)
    res = fit(data, spec, _solver_config(args))
    loo = loo_coverage_dual(res)
    payload = {
        "command": "fit",
        "n": data.n,
        "d": data.d,
        "tau": args.tau,
        "lambda": args.lam,
        "intercept": res.intercept,
        "free_intercept": res.free_intercept,
        "beta": res.beta,
        "feature_names": data.feature_names,
        "objective": res.objective,
        "loo_coverage": loo.coverage,
        "loo_tie_count": loo.tie_count,
        "loo_multiaccuracy": loo_multiaccuracy(res, data, args.tau),
        "kkt": _kkt(res.kkt),
        "iterations": res.iterations,
    }
    rows = [{"index": i, "y": data.y[i], "residual": res.residuals[i], "dual": res.duals[i],
             "loo_covered": bool(loo.per_sample_covered[i])} for i in range(data.n)]
    return payload, rows


def cmd_calibrate_level(args):
    data = _load(args)
    config = _solver_config(args)
    if args.ridge:
        grid = default_lambda_grid(data.n, args.lambda_top, args.lambda_step)
        res = calibrate_level_ridge(data, args.tau, grid, config, args.threads)
    else:
        res = calibrate_level(data, args.tau, args.lam, config)
    payload = {"command": "calibrate-level", "n": data.n, "d": data.d, **_calibration_dict(res)}
    rows = [{"parameter": a, "loo_coverage": b} for a, b in res.search_trace]
    return payload, rows


def cmd_calibrate_additive(args):
    data = _load(args)
    config = _solver_config(args)
    c_range = (args.c_lo, args.c_hi)
    if args.ridge:
        grid = default_lambda_grid(data.n, args.lambda_top, args.lambda_step)
        res = calibrate_additive_ridge(data, args.tau, grid, c_range, config, args.threads)
    else:
        res = calibrate_additive(data, args.tau, args.lam, c_range, config)
    payload = {"command": "calibrate-additive", "n": data.n, "d": data.d, **_calibration_dict(res)}
    rows = [{"parameter": a, "loo_coverage": b} for a, b in res.search_trace]
    return payload, rows


def _point_rows(X, y, values, extra=None):
    rows = []
    for i, v in enumerate(values):
        row = {"index": i, "prediction": v}
        if extra is not None:
            row.update(extra[i])
        if y is not None:
            row["y"] = y[i]
            row["covered"] = bool(y[i] <= v)
        rows.append(row)
    return rows


def _coverage_summary(rows) -> dict:
    flags = [r["covered"] for r in rows if "covered" in r]
    return {"coverage": float(np.mean(flags))} if flags else {}


def cmd_dual_threshold(args):
    data = _load(args)
    X, y = _test_features(args, data)
    spec = ProblemSpec(args.tau, args.lam)
    config = _solver_config(args)
    base = fit(data, spec, config)
    if args.randomized:
        rng = np.random.default_rng(args.seed)
        ts = rng.uniform(-(1.0 - args.tau), args.tau, size=X.shape[0])
    else:
        t = args.threshold if args.threshold is not None else fixed_threshold(base, args.tau)
        ts = np.full(X.shape[0], t)
    values = [quantile_dual_threshold(data, spec, config, x, t, base) for x, t in zip(X, ts)]
    rows = _point_rows(X, y, values, [{"threshold": t} for t in ts])
    payload = {"command": "dual-threshold", "tau": args.tau, "lambda": args.lam,
               "randomized": args.randomized, "predictions": rows, **_coverage_summary(rows)}
    return payload, rows


def cmd_conformal(args):
    data = _load(args)
    X, y = _test_features(args, data)
    spec = ProblemSpec(args.tau, args.lam)
    config = _solver_config(args)
    base = fit(data, spec, config)
    values = [full_conformal_predict(data, spec, config, x, base) for x in X]
    rows = _point_rows(X, y, values)
    payload = {"command": "conformal", "tau": args.tau, "lambda": args.lam, "predictions": rows,
               **_coverage_summary(rows)}
    return payload, rows


def _interval_rows(iv, y):
    rows = []
    for i, (lo, hi) in enumerate(iv):
        row = {"index": i, "lower": lo, "upper": hi}
        if y is not None:
            row["y"] = y[i]
            row["covered"] = bool(lo <= y[i] <= hi)
        rows.append(row)
    return rows


def cmd_cqr(args):
    data = _load(args)
    X, y = _test_features(args, data)
    iv = interval_predict(IntervalMethod.CQR, data, args.alpha, _solver_config(args), X, lam=args.lam,
                          split_fraction=args.split_fraction, seed=args.seed)
    rows = _interval_rows(iv, y)
    payload = {"command": "cqr", "alpha": args.alpha, "intervals": rows, **_coverage_summary(rows)}
    return payload, rows


def cmd_simulate(args):
    overrides = {
        "n": args.n, "dims": args.dims, "scaled_ns": args.scaled_ns, "ratio": args.ratio,
        "trials": args.trials, "n_test": args.n_test, "n_test_dual": args.n_test_dual, "tau": args.tau,
        "alpha": args.alpha, "sigma": args.sigma, "seed": args.seed, "methods": args.methods,
        "c_caps": args.c_caps, "c_range": (args.c_lo, args.c_hi), "lambda_top": args.lambda_top,
        "lambda_step": args.lambda_step, "csv": args.csv, "response": args.response,
        "threads": args.threads,
    }
    if args.dims is not None and args.scaled_ns is None:
        overrides["scaled_ns"] = ()
    report = run_figure(args.figure, overrides, _solver_config(args))
    payload = report.to_dict()
    payload["config"].pop("threads", None)
    return payload, [{k: r.get(k) for k in ROW_FIELDS} for r in report.rows]


def cmd_asymptotics(args):
    problem = AsymptoticProblem(args.gamma, args.tau, args.sigma, args.beta_second_moment, args.lam)
    sol = solve_asymptotic(problem)
    law = limiting_dual_law(sol, problem)
    quantiles = {repr(float(q)): float(law.quantile(q)) for q in args.quantiles}
    payload = {
        "command": "asymptotics",
        "gamma": args.gamma,
        "tau": args.tau,
        "sigma": args.sigma,
        "lambda": args.lam,
        "beta0_star": sol.beta0_star,
        "M_u_star": sol.M_u_star,
        "rho1_star": sol.rho1_star,
        "M_eta_star": sol.M_eta_star,
        "rho2_star": sol.rho2_star,
        "objective": sol.objective_value,
        "predicted_coverage": sol.predicted_coverage,
        "degenerate": sol.degenerate,
        "gradient_norm": sol.gradient_norm,
        "dual_law": {"mass_lower": law.mass_lower, "mass_upper": law.mass_upper,
                     "prob_nonpositive": law.prob_nonpositive, "quantiles": quantiles},
    }
    rows = [{"level": float(q), "quantile": quantiles[repr(float(q))]} for q in args.quantiles]
    return payload, rows


def cmd_evaluate(args):
    data = _load(args)
    args.x = None
    X, y = _test_features(args, data)
    if y is None:
        raise DataError(f"{args.test_csv}: response column {args.response!r} not found")
    grid = default_lambda_grid(data.n, args.lambda_top, args.lambda_step)
    iv = interval_predict(args.method, data, args.alpha, _solver_config(args), X, lam=args.lam,
                          lambda_grid=grid, c_range=(args.c_lo, args.c_hi),
                          split_fraction=args.split_fraction, seed=args.seed, threads=args.threads)
    rep = evaluate(iv, y, X, args.alpha)
    payload = {"command": "evaluate", "method": args.method, "alpha": args.alpha,
               "coverage": rep.coverage, "median_length": rep.median_length,
               "multiaccuracy": rep.multiaccuracy, "n_test": int(y.size)}
    return payload, _interval_rows(iv, y)


COMMANDS: dict[str, Callable] = {
    "fit": cmd_fit,
    "calibrate-level": cmd_calibrate_level,
    "calibrate-additive": cmd_calibrate_additive,
    "dual-threshold": cmd_dual_threshold,
    "conformal": cmd_conformal,
    "cqr": cmd_cqr,
    "simulate": cmd_simulate,
    "asymptotics": cmd_asymptotics,
    "evaluate": cmd_evaluate,
}


# --------------------------------------------------------------------------
# entry point


def _fail(code: int, name: str, message: str) -> int:
    sys.stderr.write(json.dumps({"code": name, "exit_code": code, "message": message}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        _validate(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        payload, rows = COMMANDS[args.command](args)
    except ConvergenceError as exc:
        return _fail(EXIT_CONVERGENCE, "convergence", str(exc))
    except (AsymptoticError, BracketError) as exc:
        return _fail(EXIT_CONVERGENCE, "convergence", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except OSError as exc:
        return _fail(EXIT_DATA, "data", f"{exc.filename}: {exc.strerror}")
    except ValueError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))

    text = _dumps(payload)
    if args.out:
        if args.out.lower().endswith(".csv"):
            fields = ROW_FIELDS if args.command == "simulate" else None
            content = _csv_text(rows, fields)
        else:
            content = text + "\n"
        with open(args.out, "w", newline="") as fh:
            fh.write(content)
    else:
        sys.stdout.write(text + "\n")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
