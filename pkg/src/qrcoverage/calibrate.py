"""Coverage calibration by leave-one-out search over the level or the offset."""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Dataset, DataError, FitResult, ProblemSpec
from .loo import loo_coverage_dual, loo_multiaccuracy
from .solver import ConvergenceError, SolverConfig, fit

logger = logging.getLogger(__name__)

DEFAULT_C_RANGE = (-10.0, 10.0)
MAX_BISECTIONS = 30


class Method(str, enum.Enum):
    LEVEL_ADJUST = "LevelAdjust"
    LEVEL_RIDGE = "LevelRidge"
    ADDITIVE_ADJUST = "AdditiveAdjust"
    ADDITIVE_RIDGE = "AdditiveRidge"
    BAI_CLOSED_FORM = "BaiClosedForm"
    RIDGE_ONLY = "RidgeOnly"


# flag names
SATURATED_UPPER = "saturated_upper"
SATURATED_LOWER = "saturated_lower"
OFF_TARGET = "off_target"
EMPTY_LAMBDA_SET = "empty_lambda_set"
CLIPPED = "clipped"
GRID_FAILURES = "grid_failures"


@dataclass(frozen=True)
class CalibrationResult:
    """Chosen hyperparameters with the final fit and the search history.

    ``search_trace`` holds ``(parameter, loo_coverage)`` pairs in probe order:
    the level or offset for single searches, and ``lambda`` for the ridge
    variants, whose per-lambda multiaccuracy is in ``multiaccuracy_trace``.
    """

    method: Method
    tau: float
    final_fit: FitResult
    loo_coverage: float
    tau_adj: Optional[float] = None
    c: Optional[float] = None
    lam: Optional[float] = None
    loo_multiaccuracy: Optional[float] = None
    search_trace: tuple[tuple[float, float], ...] = ()
    multiaccuracy_trace: tuple[tuple[float, float], ...] = ()
    flags: frozenset[str] = field(default_factory=frozenset)
    n: int = 0

    @property
    def coverage_gap(self) -> float:
        return abs(self.loo_coverage - self.tau)

    @property
    def on_target(self) -> bool:
        """Leave-one-out coverage within ``1/n`` of the target."""
        return self.coverage_gap <= 1.0 / self.n + 1e-12

    def predict(self, X) -> np.ndarray:
        return self.final_fit.predict(X)


def default_lambda_grid(n: int, top: float = 0.1, step: float = 0.005) -> list[float]:
    """``n * {0, step, 2 step, ..., top}``."""
    k = int(round(top / step))
    return [n * step * i for i in range(k + 1)]


def bai_level_clipped(tau: float, d: int, n: int) -> tuple[float, bool]:
    """Closed-form adjusted level and whether it had to be clipped.

    The level is ``(tau - d / (2n)) / (1 - d / n)``, clipped into
    ``[1/(n+1), 1 - 1/(n+1)]``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if n < 1 or d < 0:
        raise ValueError("need n >= 1 and d >= 0")
    lo, hi = 1.0 / (n + 1), 1.0 - 1.0 / (n + 1)
    g = d / n
    if g >= 1.0:
        raw = hi if tau > 0.5 else lo if tau < 0.5 else 0.5
        return raw, True
    raw = (tau - g / 2.0) / (1.0 - g)
    val = min(max(raw, lo), hi)
    return val, val != raw


def bai_level(tau: float, d: int, n: int) -> float:
    """Closed-form adjusted level for dimension ``d`` and sample size ``n``.

    >>> round(bai_level(0.9, 30, 300), 6)
    0.944444
    >>> bai_level(0.9, 0, 300)
    0.9
    """
    return bai_level_clipped(tau, d, n)[0]


@dataclass
class _Search:
    """Bisection on a parameter with leave-one-out coverage assumed non-decreasing."""

    probe: Callable[[float], tuple[float, FitResult]]
    tau: float
    n: int
    lo: float
    hi: float
    start: Optional[float] = None
    trace: list = field(default_factory=list)

    def run(self, max_steps: int = MAX_BISECTIONS):
        a, b = self.lo, self.hi
        tol = 1.0 / self.n + 1e-12
        best = None
        probes = []
        below = above = False
        x = self.start if self.start is not None and a < self.start < b else 0.5 * (a + b)
        for _ in range(max_steps + 1):
            cov, res = self.probe(x)
            self.trace.append((x, cov))
            gap = abs(cov - self.tau)
            probes.append((gap, x, cov, res))
            if best is None or gap < best[0]:
                best = (gap, x, cov, res)
            if gap <= tol:
                break
            if cov < self.tau:
                a, below = x, True
            else:
                b, above = x, True
            x = 0.5 * (a + b)
        flags = set()
        if best[0] > tol:
            flags.add(OFF_TARGET)
            if below and not above:
                flags.add(SATURATED_UPPER)
            elif above and not below:
                flags.add(SATURATED_LOWER)
        if flags & {SATURATED_UPPER, SATURATED_LOWER}:
            # coverage is flat at the end of the range; report the probe nearest to it
            sign = 1.0 if SATURATED_UPPER in flags else -1.0
            tied = [p for p in probes if p[0] <= best[0]]
            best = max(tied, key=lambda p: sign * p[1])
        return best, flags


def _level_search(dataset: Dataset, tau: float, lam: float, config: SolverConfig,
                  jitter: float = 0.0):
    n = dataset.n
    warm: list[Optional[FitResult]] = [None]

    def probe(level: float):
        res = fit(dataset, ProblemSpec(level, lam, jitter=jitter), config, warm_start=warm[0])
        warm[0] = res
        return loo_coverage_dual(res).coverage, res

    search = _Search(probe, tau, n, 1.0 / (n + 1), 1.0 - 1.0 / (n + 1), start=tau)
    best, flags = search.run()
    return best, flags, search.trace


def calibrate_level(dataset: Dataset, tau: float, lam: float = 0.0,
                    config: SolverConfig = SolverConfig(), jitter: float = 0.0) -> CalibrationResult:
    """Pick the fitting level whose leave-one-out coverage is closest to ``tau``.

    Bisects over ``[1/(n+1), 1 - 1/(n+1)]``, stopping once the coverage is
    within ``1/n`` of ``tau`` or after 30 bisections, and keeps the best
    probe.  If every probe undercovers the result carries the
    ``saturated_upper`` flag.
    """
    if dataset.n < 2:
        raise DataError("calibration needs at least two samples")
    (gap, level, cov, res), flags, trace = _level_search(dataset, tau, lam, config, jitter)
    ma = loo_multiaccuracy(res, dataset, tau) if dataset.d else None
    return CalibrationResult(Method.LEVEL_ADJUST, tau, res, cov, tau_adj=level, lam=lam,
                             loo_multiaccuracy=ma, search_trace=tuple(trace),
                             flags=frozenset(flags), n=dataset.n)


def _additive_search(dataset: Dataset, tau: float, lam: float, c_range, config: SolverConfig):
    c_lo, c_hi = map(float, c_range)
    if not c_lo < c_hi:
        raise ValueError("c_range must satisfy c_lo < c_hi")
    warm: list[Optional[FitResult]] = [None]

    def probe(c: float):
        spec = ProblemSpec(tau, lam).with_offset(c)
        res = fit(dataset, spec, config, warm_start=warm[0])
        warm[0] = res
        return loo_coverage_dual(res).coverage, res

    search = _Search(probe, tau, dataset.n, c_lo, c_hi)
    best, flags = search.run()
    # the probes never reach the ends of the range exactly; check the end itself
    if SATURATED_UPPER in flags or SATURATED_LOWER in flags:
        end = c_hi if SATURATED_UPPER in flags else c_lo
        cov, res = probe(end)
        search.trace.append((end, cov))
        if abs(cov - tau) <= best[0] + 1e-12:
            best = (abs(cov - tau), end, cov, res)
    return best, flags, search.trace


def calibrate_additive(dataset: Dataset, tau: float, lam: float = 0.0,
                       c_range: Sequence[float] = DEFAULT_C_RANGE,
                       config: SolverConfig = SolverConfig()) -> CalibrationResult:
    """Pick the offset of an intercept-less fit by leave-one-out coverage.

    Bisection over ``c_range`` with the same stopping rule as
    :func:`calibrate_level`.  Saturation at either end of the range is flagged.
    """
    if dataset.n < 2:
        raise DataError("calibration needs at least two samples")
    (gap, c, cov, res), flags, trace = _additive_search(dataset, tau, lam, c_range, config)
    ma = loo_multiaccuracy(res, dataset, tau) if dataset.d else None
    return CalibrationResult(Method.ADDITIVE_ADJUST, tau, res, cov, c=c, lam=lam,
                             loo_multiaccuracy=ma, search_trace=tuple(trace),
                             flags=frozenset(flags), n=dataset.n)


def _ridge_select(dataset: Dataset, tau: float, lambda_grid: Sequence[float],
                  inner: Callable[[float], CalibrationResult], method: Method,
                  threads: int = 1) -> CalibrationResult:
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ValueError("lambda_grid must be non-empty")

    def run(lam: float):
        try:
            return inner(lam)
        except ConvergenceError as exc:
            logger.warning("calibration failed at lambda=%g: %s", lam, exc)
            return exc

    if threads > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, grid))
    else:
        outcomes = [run(lam) for lam in grid]
    done = [(lam, r) for lam, r in zip(grid, outcomes) if isinstance(r, CalibrationResult)]
    if not done:
        raise outcomes[0]
    flags = set()
    if len(done) < len(grid):
        flags.add(GRID_FAILURES)
    trace = tuple((lam, r.loo_coverage) for lam, r in done)
    ma_trace = tuple((lam, r.loo_multiaccuracy) for lam, r in done if r.loo_multiaccuracy is not None)
    members = [(lam, r) for lam, r in done if r.on_target]
    if members:
        key = (lambda item: item[1].loo_multiaccuracy) if dataset.d else (lambda item: 0.0)
        lam, chosen = min(members, key=key)
    else:
        flags.add(EMPTY_LAMBDA_SET)
        lam, chosen = min(done, key=lambda item: item[1].coverage_gap)
    flags |= set(chosen.flags)
    return CalibrationResult(method, tau, chosen.final_fit, chosen.loo_coverage,
                             tau_adj=chosen.tau_adj, c=chosen.c, lam=lam,
                             loo_multiaccuracy=chosen.loo_multiaccuracy, search_trace=trace,
                             multiaccuracy_trace=ma_trace, flags=frozenset(flags), n=dataset.n)


def calibrate_level_ridge(dataset: Dataset, tau: float, lambda_grid: Optional[Sequence[float]] = None,
                          config: SolverConfig = SolverConfig(), threads: int = 1) -> CalibrationResult:
    """Joint choice of ridge level and fitting level.

    For each ``lambda`` the level is calibrated; among the ``lambda`` whose
    leave-one-out coverage is within ``1/n`` of ``tau`` the one with the
    smallest leave-one-out multiaccuracy error is returned.  If none is
    within ``1/n`` the smallest coverage gap wins and ``empty_lambda_set``
    is flagged.
    """
    grid = default_lambda_grid(dataset.n) if lambda_grid is None else lambda_grid
    return _ridge_select(dataset, tau, grid, lambda lam: calibrate_level(dataset, tau, lam, config),
                         Method.LEVEL_RIDGE, threads)


def calibrate_additive_ridge(dataset: Dataset, tau: float, lambda_grid: Optional[Sequence[float]] = None,
                             c_range: Sequence[float] = DEFAULT_C_RANGE,
                             config: SolverConfig = SolverConfig(), threads: int = 1) -> CalibrationResult:
    """Joint choice of ridge level and offset; mirrors :func:`calibrate_level_ridge`."""
    grid = default_lambda_grid(dataset.n) if lambda_grid is None else lambda_grid
    return _ridge_select(dataset, tau, grid,
                         lambda lam: calibrate_additive(dataset, tau, lam, c_range, config),
                         Method.ADDITIVE_RIDGE, threads)


def calibrate_bai(dataset: Dataset, tau: float, lam: float = 0.0,
                  config: SolverConfig = SolverConfig()) -> CalibrationResult:
    """Fit at the closed-form adjusted level; no search."""
    level, clipped = bai_level_clipped(tau, dataset.d, dataset.n)
    res = fit(dataset, ProblemSpec(level, lam), config)
    cov = loo_coverage_dual(res).coverage
    ma = loo_multiaccuracy(res, dataset, tau) if dataset.d else None
    return CalibrationResult(Method.BAI_CLOSED_FORM, tau, res, cov, tau_adj=level, lam=lam,
                             loo_multiaccuracy=ma, search_trace=((level, cov),),
                             flags=frozenset({CLIPPED} if clipped else ()), n=dataset.n)


def calibrate_ridge_only(dataset: Dataset, tau: float, config: SolverConfig = SolverConfig(),
                         lam_start: Optional[float] = None, max_steps: int = MAX_BISECTIONS) -> CalibrationResult:
    """Smallest ridge level whose leave-one-out coverage at level ``tau`` is at least ``tau - 1/n``.

    The level stays at ``tau``.  An upper bracket is found by doubling from
    ``lam_start`` (default ``0.01 n``), then the smallest qualifying level is
    bisected.  ``off_target`` is flagged if no level qualifies.
    """
    n = dataset.n
    need = tau - 1.0 / n - 1e-12
    trace = []
    warm: list[Optional[FitResult]] = [None]

    def probe(lam: float):
        res = fit(dataset, ProblemSpec(tau, lam), config, warm_start=warm[0])
        warm[0] = res
        cov = loo_coverage_dual(res).coverage
        trace.append((lam, cov))
        return cov, res

    cov, res = probe(0.0)
    good = (0.0, cov, res) if cov >= need else None
    flags = set()
    if good is None:
        lo, hi = 0.0, lam_start if lam_start is not None else 0.01 * n
        for _ in range(40):
            cov, res = probe(hi)
            if cov >= need:
                good = (hi, cov, res)
                break
            lo, hi = hi, 2.0 * hi
        if good is None:
            flags.add(OFF_TARGET)
            good = (hi, cov, res)
        else:
            for _ in range(max_steps):
                mid = 0.5 * (lo + hi)
                cov, res = probe(mid)
                if cov >= need:
                    hi, good = mid, (mid, cov, res)
                else:
                    lo = mid
                if hi - lo <= 1e-6 * max(hi, 1.0):
                    break
    lam, cov, res = good
    ma = loo_multiaccuracy(res, dataset, tau) if dataset.d else None
    return CalibrationResult(Method.RIDGE_ONLY, tau, res, cov, tau_adj=tau, lam=lam,
                             loo_multiaccuracy=ma, search_trace=tuple(trace),
                             flags=frozenset(flags), n=n)
