"""Two-sided prediction intervals for every method, plus evaluation metrics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .calibrate import DEFAULT_C_RANGE, calibrate_additive_ridge, calibrate_level_ridge
from .core import Dataset, DataError, ProblemSpec
from .conformal import fixed_threshold, quantile_dual_threshold
from .loo import multiaccuracy
from .solver import SolverConfig, fit


class IntervalMethod(str, enum.Enum):
    QR = "QR"
    CQR = "CQR"
    GCC_RAND = "GCCRand"
    FIXED_THRESH = "FixedThresh"
    LEVEL_RIDGE = "LevelRidge"
    ADDITIVE_RIDGE = "AdditiveRidge"


@dataclass(frozen=True)
class IntervalReport:
    """Coverage, median clipped width and multiaccuracy of a set of intervals."""

    coverage: float
    median_length: float
    multiaccuracy: float
    covered: Optional[NDArray[np.bool_]] = None
    widths: Optional[NDArray[np.float64]] = None


def _as_matrix(x_test: ArrayLike, d: int) -> NDArray[np.float64]:
    X = np.asarray(x_test, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, d) if d else X.reshape(-1, 0)
    if X.shape[1] != d:
        raise DataError(f"test features have {X.shape[1]} columns, expected {d}")
    return X


def one_sided_predict(method: IntervalMethod, dataset: Dataset, tau: float, config: SolverConfig,
                      X: NDArray, *, lam: float = 0.0, lambda_grid: Optional[Sequence[float]] = None,
                      c_range: Sequence[float] = DEFAULT_C_RANGE, seed: int = 0,
                      threads: int = 1) -> NDArray[np.float64]:
    """Level-``tau`` quantile predictions of one method at the rows of ``X``."""
    method = IntervalMethod(method)
    if method is IntervalMethod.QR:
        return fit(dataset, ProblemSpec(tau, lam), config).predict(X)
    if method is IntervalMethod.LEVEL_RIDGE:
        return calibrate_level_ridge(dataset, tau, lambda_grid, config, threads).predict(X)
    if method is IntervalMethod.ADDITIVE_RIDGE:
        return calibrate_additive_ridge(dataset, tau, lambda_grid, c_range, config, threads).predict(X)
    spec = ProblemSpec(tau, lam)
    base = fit(dataset, spec, config)
    if method is IntervalMethod.FIXED_THRESH:
        t = fixed_threshold(base, tau)
        return np.array([quantile_dual_threshold(dataset, spec, config, x, t, base) for x in X])
    if method is IntervalMethod.GCC_RAND:
        rng = np.random.default_rng(seed)
        us = rng.uniform(-(1.0 - tau), tau, size=X.shape[0])
        return np.array([quantile_dual_threshold(dataset, spec, config, x, u, base) for x, u in zip(X, us)])
    raise ValueError(f"{method} is not a one-sided method")


def cqr_predict(dataset: Dataset, alpha: float, split_fraction: float = 0.75,
                config: SolverConfig = SolverConfig(), x_test: ArrayLike = None, seed: int = 0,
                lam: float = 0.0) -> NDArray[np.float64]:
    """Split conformalized quantile regression intervals.

    Quantile regressions at ``alpha/2`` and ``1 - alpha/2`` are fit on a
    random ``split_fraction`` of the data; the remaining calibration fold
    gives scores ``max(lo(X) - Y, Y - hi(X))`` and both bounds move out by
    the ``ceil((1 - alpha)(n2 + 1))``-th smallest score.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split_fraction must lie in (0, 1)")
    n = dataset.n
    n1 = int(math.floor(split_fraction * n))
    n2 = n - n1
    if n1 < 1 or n2 < 1:
        raise DataError(f"split of {n} samples leaves an empty fold")
    perm = np.random.default_rng(seed).permutation(n)
    train, calib = dataset.subset(perm[:n1]), dataset.subset(perm[n1:])
    lo_fit = fit(train, ProblemSpec(alpha / 2.0, lam), config)
    hi_fit = fit(train, ProblemSpec(1.0 - alpha / 2.0, lam), config)
    scores = np.maximum(lo_fit.predict(calib.X) - calib.y, calib.y - hi_fit.predict(calib.X))
    k = math.ceil((1.0 - alpha) * (n2 + 1))
    q = math.inf if k > n2 else float(np.sort(scores)[k - 1])
    X = _as_matrix(x_test, dataset.d)
    return np.column_stack([lo_fit.predict(X) - q, hi_fit.predict(X) + q])


def interval_predict(method: IntervalMethod, dataset: Dataset, alpha: float,
                     config: SolverConfig = SolverConfig(), x_test: ArrayLike = None, *,
                     lam: float = 0.0, lambda_grid: Optional[Sequence[float]] = None,
                     c_range: Sequence[float] = DEFAULT_C_RANGE, split_fraction: float = 0.75,
                     seed: int = 0, threads: int = 1) -> NDArray[np.float64]:
    """``(lower, upper)`` rows for each test point.

    Each side is produced independently at levels ``alpha/2`` and
    ``1 - alpha/2``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    method = IntervalMethod(method)
    X = _as_matrix(x_test, dataset.d)
    if method is IntervalMethod.CQR:
        return cqr_predict(dataset, alpha, split_fraction, config, X, seed, lam)
    kw = dict(lam=lam, lambda_grid=lambda_grid, c_range=c_range, threads=threads)
    lower = one_sided_predict(method, dataset, alpha / 2.0, config, X, seed=seed, **kw)
    upper = one_sided_predict(method, dataset, 1.0 - alpha / 2.0, config, X, seed=seed + 1, **kw)
    return np.column_stack([lower, upper])


def evaluate(intervals: ArrayLike, y_test: ArrayLike, x_test: ArrayLike, alpha: float) -> IntervalReport:
    """Marginal coverage, median clipped width and multiaccuracy against ``1 - alpha``.

    Widths are ``max(upper - lower, 0)``.
    """
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    y = np.asarray(y_test, dtype=float).reshape(-1)
    X = np.asarray(x_test, dtype=float)
    if X.ndim == 1:
        X = X.reshape(y.size, -1)
    if not (iv.shape[0] == y.size == X.shape[0]):
        raise DataError("intervals, responses and features must have equal lengths")
    covered = (iv[:, 0] <= y) & (y <= iv[:, 1])
    with np.errstate(invalid="ignore"):
        widths = np.maximum(iv[:, 1] - iv[:, 0], 0.0)
    widths = np.where(np.isnan(widths), 0.0, widths)
    ma = multiaccuracy(X, covered, 1.0 - alpha)
    return IntervalReport(float(np.mean(covered)), float(np.median(widths)), ma, covered, widths)
