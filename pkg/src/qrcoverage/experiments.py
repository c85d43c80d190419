"""Seeded simulation trials for the coverage experiments, with aggregation and CSV/JSON output."""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from .baselines import IntervalMethod, evaluate, interval_predict
from .calibrate import (
    DEFAULT_C_RANGE,
    calibrate_additive,
    calibrate_additive_ridge,
    calibrate_level,
    calibrate_level_ridge,
    calibrate_ridge_only,
    default_lambda_grid,
)
from .conformal import BracketError, fixed_threshold, randomized_gcc_predict, threshold_covers
from .core import Dataset, DataError, ProblemSpec, normalize, read_csv
from .loo import multiaccuracy
from .solver import ConvergenceError, SolverConfig, fit

logger = logging.getLogger(__name__)


class Figure(str, enum.Enum):
    FIG1 = "fig1"
    FIG2 = "fig2"
    FIG3 = "fig3"
    FIG4 = "fig4"
    FIG5 = "fig5"
    FIG6 = "fig6"
    FIG7 = "fig7"


@dataclass(frozen=True)
class SimConfig:
    """Gaussian linear model ``Y = X beta + eps`` with ``X ~ N(0, I_d)``, ``beta ~ N(0, I_d / d)``."""

    n: int = 300
    d: int = 1
    n_test: int = 2000
    tau: float = 0.9
    trials: int = 100
    seed: int = 0
    sigma: float = 1.0
    model: str = "GaussianLinear"

    def __post_init__(self) -> None:
        if self.n < 1 or self.d < 0 or self.n_test < 1 or self.trials < 1:
            raise ValueError("need n >= 1, d >= 0, n_test >= 1 and trials >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.model != "GaussianLinear":
            raise ValueError(f"unknown model {self.model!r}")


def trial_rng(seed: int, trial: int, *stream: int) -> np.random.Generator:
    """Independent generator for one trial; the same arguments always give the same stream."""
    return np.random.default_rng(np.random.SeedSequence([seed & (2 ** 64 - 1), trial, *stream]))


def generate(config: SimConfig, trial: int) -> tuple[Dataset, Dataset, np.ndarray]:
    """Training set, test set and true coefficients of one trial."""
    rng = trial_rng(config.seed, trial, config.n, config.d)
    d = config.d
    beta = rng.standard_normal(d) / math.sqrt(d) if d else np.zeros(0)

    def draw(m: int) -> Dataset:
        X = rng.standard_normal((m, d))
        return Dataset(X, X @ beta + config.sigma * rng.standard_normal(m))

    train = draw(config.n)
    test = draw(config.n_test)
    return train, test, beta


# --------------------------------------------------------------------------
# figure protocols


@dataclass(frozen=True)
class FigureConfig:
    """Protocol knobs of one figure; every field can be overridden.

    ``dims`` lists the dimensions at the fixed sample size ``n``;
    ``scaled_ns`` adds ``(n, n * ratio)`` points at the fixed aspect ratio
    ``ratio``.  ``n_test_dual`` caps the test points on which the
    dual-thresholding methods are evaluated.
    """

    figure: Figure
    n: int = 200
    dims: tuple[int, ...] = (20, 40, 80)
    scaled_ns: tuple[int, ...] = ()
    ratio: float = 0.1
    trials: int = 100
    n_test: int = 2000
    n_test_dual: int = 100
    tau: float = 0.9
    alpha: float = 0.1
    seed: int = 0
    sigma: float = 1.0
    lambda_top: float = 0.1
    lambda_step: float = 0.005
    c_range: tuple[float, float] = DEFAULT_C_RANGE
    c_caps: tuple[float, ...] = ()
    methods: tuple[str, ...] = ()
    csv: Optional[str] = None
    response: Optional[str] = None
    threads: int = 1


FIGURE_DEFAULTS: dict[Figure, dict[str, Any]] = {
    Figure.FIG1: dict(n=300, dims=(1, 15, 30, 60, 90), trials=100),
    Figure.FIG2: dict(n=200, dims=(10, 20, 40, 60, 80, 100), trials=100),
    Figure.FIG3: dict(n=200, dims=(10, 20, 40, 60, 80), trials=100),
    Figure.FIG4: dict(n=200, dims=(10, 20, 40, 60, 80), trials=100),
    Figure.FIG5: dict(n=200, dims=(40,), trials=2000, n_test=1),
    Figure.FIG6: dict(n=200, dims=(20, 40, 80), trials=200),
    Figure.FIG7: dict(n=400, dims=(10, 20, 40, 80), trials=20, lambda_top=0.2, n_test=2000,
                      n_test_dual=50,
                      methods=("QR", "CQR", "GCCRand", "FixedThresh", "LevelRidge", "AdditiveRidge")),
}

FIXED_METHODS = {
    Figure.FIG1: ("QR",),
    Figure.FIG2: ("LevelAdjust",),
    Figure.FIG3: ("LevelAdjust", "RidgeOnly", "LevelRidge"),
    Figure.FIG4: ("AdditiveAdjust",),
    Figure.FIG5: ("GCCRand",),
    Figure.FIG6: ("QR", "LevelRidge", "AdditiveRidge", "FixedThresh"),
}


def figure_config(figure: Figure | str, **overrides) -> FigureConfig:
    figure = Figure(figure)
    params = dict(FIGURE_DEFAULTS[figure])
    params.update({k: v for k, v in overrides.items() if v is not None})
    if not params.get("methods"):
        params["methods"] = FIXED_METHODS.get(figure, ())
    for key in ("dims", "scaled_ns", "c_caps", "methods", "c_range"):
        if key in params and not isinstance(params[key], tuple):
            params[key] = tuple(params[key])
    return FigureConfig(figure=figure, **params)


ROW_FIELDS = (
    "figure", "trial", "seed", "n", "d", "method", "group", "coverage", "miscoverage",
    "median_length", "multiaccuracy", "estimation_error", "tau_adj", "c", "lam", "u",
    "cutoff", "n_eval", "flags", "error",
)
METRICS = ("coverage", "miscoverage", "median_length", "multiaccuracy", "estimation_error",
           "tau_adj", "c", "lam", "cutoff")


@dataclass(frozen=True)
class ExperimentReport:
    """Per-trial rows and their aggregates over trials.

    Aggregates are keyed by ``(n, d, method, group)`` and hold, for every
    metric present, the mean, its standard error and the five boxplot
    quantiles.
    """

    figure: Figure
    config: FigureConfig
    rows: tuple[dict, ...]
    aggregates: tuple[dict, ...] = ()
    summary: dict = field(default_factory=dict)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: _fmt(row.get(k)) for k in ROW_FIELDS})

    def to_dict(self) -> dict:
        cfg = dataclasses.asdict(self.config)
        cfg["figure"] = self.figure.value
        return {"figure": self.figure.value, "config": cfg, "aggregates": list(self.aggregates),
                "summary": self.summary, "rows": list(self.rows)}

    def to_json(self, path: Optional[str] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def aggregate(self, **match) -> dict:
        hits = [a for a in self.aggregates if all(a.get(k) == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} aggregates match {match}")
        return hits[0]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, enum.Enum):
        return v.value
    raise TypeError(type(v))


def aggregate_rows(rows: Iterable[dict]) -> list[dict]:
    """Mean, standard error and boxplot quantiles per ``(n, d, method, group)``, in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row.get("error"):
            continue
        key = (row["n"], row["d"], row["method"], row.get("group") or "")
        groups.setdefault(key, []).append(row)
    out = []
    for (n, d, method, group), members in groups.items():
        agg: dict[str, Any] = {"n": n, "d": d, "method": method, "group": group, "count": len(members)}
        for metric in METRICS:
            vals = np.array([r[metric] for r in members if r.get(metric) is not None], dtype=float)
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                continue
            se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            q = np.quantile(vals, [0.0, 0.25, 0.5, 0.75, 1.0])
            agg[metric] = {"mean": float(np.mean(vals)), "se": se,
                           "quantiles": [float(v) for v in q]}
        out.append(agg)
    return out


def _row(cfg: FigureConfig, trial: int, n: int, d: int, method: str, **values) -> dict:
    row = {"figure": cfg.figure.value, "trial": trial, "seed": cfg.seed, "n": n, "d": d,
           "method": method}
    row.update(values)
    if "coverage" in row and row["coverage"] is not None and "miscoverage" not in row:
        row["miscoverage"] = 1.0 - row["coverage"]
    if isinstance(row.get("flags"), (set, frozenset)):
        row["flags"] = ";".join(sorted(row["flags"]))
    return row


def _one_sided(cfg: FigureConfig, fit_pred: np.ndarray, test: Dataset, target: float) -> dict:
    covered = test.y <= fit_pred
    out = {"coverage": float(np.mean(covered)), "n_eval": test.n}
    if test.d:
        out["multiaccuracy"] = multiaccuracy(test.X, covered, target)
    return out


def _sim_trial(cfg: FigureConfig, config: SolverConfig, n: int, d: int, trial: int) -> list[dict]:
    sim = SimConfig(n=n, d=d, n_test=cfg.n_test, tau=cfg.tau, trials=cfg.trials, seed=cfg.seed,
                    sigma=cfg.sigma)
    train, test, beta = generate(sim, trial)
    tau = cfg.tau
    grid = default_lambda_grid(n, cfg.lambda_top, cfg.lambda_step)
    rows = []
    for method in cfg.methods:
        try:
            rows.extend(_run_method(cfg, config, method, train, test, beta, grid, trial))
        except (ConvergenceError, BracketError, DataError) as exc:
            rows.append(_row(cfg, trial, n, d, method, error=f"{type(exc).__name__}: {exc}"))
    return rows


def _run_method(cfg, config, method, train, test, beta, grid, trial) -> list[dict]:
    n, d, tau = train.n, train.d, cfg.tau
    est = (lambda res: float(np.linalg.norm(res.beta - beta)))
    if cfg.figure is Figure.FIG7:
        return [_two_sided(cfg, config, method, train, test, grid, trial)]
    if method == "QR":
        res = fit(train, ProblemSpec(tau), config)
        return [_row(cfg, trial, n, d, method, estimation_error=est(res),
                     **_one_sided(cfg, res.predict(test.X), test, tau))]
    if method == "LevelAdjust":
        r = calibrate_level(train, tau, 0.0, config)
        return [_row(cfg, trial, n, d, method, tau_adj=r.tau_adj, lam=0.0, estimation_error=est(r.final_fit),
                     flags=r.flags, **_one_sided(cfg, r.predict(test.X), test, tau))]
    if method == "RidgeOnly":
        r = calibrate_ridge_only(train, tau, config)
        return [_row(cfg, trial, n, d, method, tau_adj=tau, lam=r.lam, estimation_error=est(r.final_fit),
                     flags=r.flags, **_one_sided(cfg, r.predict(test.X), test, tau))]
    if method == "LevelRidge":
        r = calibrate_level_ridge(train, tau, grid, config)
        return [_row(cfg, trial, n, d, method, tau_adj=r.tau_adj, lam=r.lam,
                     estimation_error=est(r.final_fit), flags=r.flags,
                     **_one_sided(cfg, r.predict(test.X), test, tau))]
    if method == "AdditiveRidge":
        r = calibrate_additive_ridge(train, tau, grid, cfg.c_range, config)
        return [_row(cfg, trial, n, d, method, c=r.c, lam=r.lam, estimation_error=est(r.final_fit),
                     flags=r.flags, **_one_sided(cfg, r.predict(test.X), test, tau))]
    if method == "AdditiveAdjust":
        caps = cfg.c_caps or (cfg.c_range[1],)
        rows = []
        for cap in caps:
            r = calibrate_additive(train, tau, 0.0, (cfg.c_range[0], cap), config)
            rows.append(_row(cfg, trial, n, d, method, group=f"c_hi={cap:g}" if cfg.c_caps else "",
                             c=r.c, lam=0.0, estimation_error=est(r.final_fit), flags=r.flags,
                             **_one_sided(cfg, r.predict(test.X), test, tau)))
        return rows
    if method == "FixedThresh":
        spec = ProblemSpec(tau)
        base = fit(train, spec, config)
        t_hat = fixed_threshold(base, tau)
        m = min(cfg.n_test_dual, test.n)
        covered = np.array([threshold_covers(train, spec, config, test.X[i], float(test.y[i]), t_hat, base)
                            for i in range(m)])
        out = {"coverage": float(np.mean(covered)), "n_eval": m}
        if d:
            out["multiaccuracy"] = multiaccuracy(test.X[:m], covered, tau)
        return [_row(cfg, trial, n, d, method, **out)]
    if method == "GCCRand":
        spec = ProblemSpec(tau)
        base = fit(train, spec, config)
        rng = trial_rng(cfg.seed, trial, n, d, 1)
        u = float(rng.uniform(-(1.0 - tau), tau))
        x, y = test.X[0], float(test.y[0])
        cutoff = randomized_gcc_predict(train, spec, config, x, u, base)
        covered = y <= cutoff
        return [_row(cfg, trial, n, d, method, u=u, cutoff=cutoff, coverage=float(covered), n_eval=1,
                     group=f"u_bin={_u_bin(u, tau)}")]
    raise ValueError(f"method {method!r} is not available for {cfg.figure.value}")


U_BINS = 10


def _u_bin(u: float, tau: float) -> int:
    return min(int((u + 1.0 - tau) * U_BINS), U_BINS - 1)


def _two_sided(cfg, config, method, train, test, grid, trial) -> dict:
    n, d = train.n, train.d
    m = test.n
    if method in ("GCCRand", "FixedThresh"):
        m = min(cfg.n_test_dual, test.n)
    X, y = test.X[:m], test.y[:m]
    iv = interval_predict(IntervalMethod(method), train, cfg.alpha, config, X, lambda_grid=grid,
                          c_range=cfg.c_range, seed=int(trial_rng(cfg.seed, trial, 2).integers(2 ** 31)))
    rep = evaluate(iv, y, X, cfg.alpha)
    return _row(cfg, trial, n, d, method, coverage=rep.coverage, median_length=rep.median_length,
                multiaccuracy=rep.multiaccuracy, n_eval=m)


def _real_trial(cfg: FigureConfig, config: SolverConfig, data: Dataset, d: int, trial: int) -> list[dict]:
    rng = trial_rng(cfg.seed, trial, d, 3)
    if d > data.d:
        raise DataError(f"requested {d} features but the data has {data.d}")
    if cfg.n >= data.n:
        raise DataError(f"training size {cfg.n} leaves no test data out of {data.n}")
    perm = rng.permutation(data.n)
    cols = np.sort(rng.choice(data.d, size=d, replace=False))
    n_test = min(cfg.n_test, data.n - cfg.n)
    sub = Dataset(data.X[:, cols], data.y)
    train, test = sub.subset(perm[:cfg.n]), sub.subset(perm[cfg.n:cfg.n + n_test])
    grid = default_lambda_grid(cfg.n, cfg.lambda_top, cfg.lambda_step)
    rows = []
    for method in cfg.methods:
        try:
            rows.append(_two_sided(cfg, config, method, train, test, grid, trial))
        except (ConvergenceError, BracketError, DataError) as exc:
            rows.append(_row(cfg, trial, cfg.n, d, method, error=f"{type(exc).__name__}: {exc}"))
    return rows


def _points(cfg: FigureConfig) -> list[tuple[int, int]]:
    pts = [(cfg.n, d) for d in cfg.dims]
    pts += [(n, max(1, int(round(cfg.ratio * n)))) for n in cfg.scaled_ns]
    return pts


def run_figure(figure: Figure | str, overrides: Optional[dict] = None,
               config: SolverConfig = SolverConfig(),
               progress: Optional[Callable[[int, int], None]] = None) -> ExperimentReport:
    """Run one figure's protocol and return its report.

    Trials run on ``threads`` workers; rows are assembled in trial order so
    the report does not depend on the thread count.  Failed trials are
    recorded in the ``error`` column; the run fails only if every row fails.
    """
    cfg = figure_config(figure, **(overrides or {}))
    if cfg.figure is Figure.FIG7 and cfg.csv:
        if not cfg.response:
            raise DataError("a response column is required with a CSV")
        data = normalize(read_csv(cfg.csv, cfg.response))
        tasks = [(d, t) for d in cfg.dims for t in range(cfg.trials)]
        job = lambda task: _real_trial(cfg, config, data, task[0], task[1])
    else:
        tasks = [(n, d, t) for (n, d) in _points(cfg) for t in range(cfg.trials)]
        job = lambda task: _sim_trial(cfg, config, *task)
    done = [0]

    def wrapped(task):
        out = job(task)
        done[0] += 1
        if progress is not None:
            progress(done[0], len(tasks))
        return out

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            chunks = list(pool.map(wrapped, tasks))
    else:
        chunks = [wrapped(t) for t in tasks]
    rows = tuple(r for chunk in chunks for r in chunk)
    if rows and all(r.get("error") for r in rows):
        raise RuntimeError(f"every trial failed; first error: {rows[0]['error']}")
    aggs = tuple(aggregate_rows(rows))
    summary = _summary(cfg, rows, aggs)
    return ExperimentReport(cfg.figure, cfg, rows, aggs, summary)


def _summary(cfg: FigureConfig, rows: Sequence[dict], aggs: Sequence[dict]) -> dict:
    out: dict[str, Any] = {"rows": len(rows), "failed_rows": sum(1 for r in rows if r.get("error"))}
    if cfg.figure is Figure.FIG5:
        means = [a["cutoff"]["mean"] for a in aggs if "cutoff" in a]
        if means and min(means) > 0:
            out["cutoff_ratio"] = max(means) / min(means)
    return out
