"""Full-conformal quantile regression through the dual of the augmented fit.

Every prediction here is a supremum ``sup{y : eta_{n+1}(y) <= t}`` where
``eta_{n+1}(y)`` is the dual of the imputed point in the fit on the training
data plus ``(x_new, y)``.  That map is non-decreasing in ``y``, so the
supremum is found by bracketing and bisection, each probe warm-started from
the nearest previous one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import Dataset, FitResult, ProblemSpec, empirical_quantile
from .solver import SolverConfig, fit, fit_augmented

# float slack when comparing a dual against a threshold
_EQ_SLACK = 1e-10


class BracketError(RuntimeError):
    """The bisection bracket could not be expanded to straddle the threshold."""


@dataclass(frozen=True)
class DualPathQuery:
    """One thresholded prediction request.

    ``bracket`` defaults to the plain fit's prediction plus or minus ten
    response standard deviations; ``tol_y`` defaults to ``1e-6`` times the
    response scale.
    """

    x_new: NDArray[np.float64]
    threshold: float
    bracket: Optional[tuple[float, float]] = None
    tol_y: Optional[float] = None


@dataclass(frozen=True)
class ThresholdPrediction:
    """Result of a thresholded prediction.

    ``sentinel`` is set when ``value`` is an explicit infinity because the
    threshold lies outside the dual box.
    """

    value: float
    sentinel: bool
    probes: int
    bracket: tuple[float, float]


class DualPath:
    """``y -> eta_{n+1}(y)`` for a fixed training set and test features.

    Fits are warm-started from the probe with the closest imputed label.
    """

    def __init__(self, dataset: Dataset, spec: ProblemSpec, config: SolverConfig,
                 x_new: ArrayLike, base_fit: Optional[FitResult] = None):
        self.dataset = dataset
        self.spec = spec
        self.config = config
        self.x_new = np.asarray(x_new, dtype=float).reshape(-1)
        self.base_fit = base_fit if base_fit is not None else fit(dataset, spec, config)
        self.probes = 0
        self._cache: dict[float, FitResult] = {}

    def fit_at(self, y: float) -> FitResult:
        y = float(y)
        if y in self._cache:
            return self._cache[y]
        warm = self.base_fit
        if self._cache:
            nearest = min(self._cache, key=lambda v: abs(v - y))
            warm = self._cache[nearest]
        res = fit_augmented(self.dataset, self.spec, self.config, self.x_new, y, warm_start=warm)
        self._cache[y] = res
        self.probes += 1
        return res

    def __call__(self, y: float) -> float:
        return float(self.fit_at(y).duals[-1])

    def base_prediction(self) -> float:
        return float(self.base_fit.predict(self.x_new)[0])


def dual_at(dataset: Dataset, spec: ProblemSpec, config: SolverConfig, x_new: ArrayLike,
            y: float, warm_start: Optional[FitResult] = None) -> float:
    """Dual coordinate of the imputed point ``(x_new, y)`` in the augmented fit."""
    return float(fit_augmented(dataset, spec, config, x_new, y, warm_start=warm_start).duals[-1])


def _sup_below(path, t: float, center: float, half: float, tol_y: float,
               max_doublings: int = 60) -> tuple[float, int, tuple[float, float]]:
    """``sup{y : path(y) <= t}`` for a non-decreasing ``path`` by bracketing and bisection."""
    lo, hi = center - half, center + half
    width = half
    doublings = 0
    while path(lo) > t + _EQ_SLACK:
        if doublings >= max_doublings:
            raise BracketError(f"no label below {lo:.3g} has dual <= {t}")
        width *= 2.0
        hi, lo = lo, lo - width
        doublings += 1
    while path(hi) <= t + _EQ_SLACK:
        if doublings >= max_doublings:
            raise BracketError(f"no label above {hi:.3g} has dual > {t}")
        width *= 2.0
        lo, hi = hi, hi + width
        doublings += 1
    bracket = (lo, hi)
    while hi - lo > tol_y:
        mid = 0.5 * (lo + hi)
        if path(mid) <= t + _EQ_SLACK:
            lo = mid
        else:
            hi = mid
    return lo, doublings, bracket


def solve_query(dataset: Dataset, spec: ProblemSpec, config: SolverConfig, query: DualPathQuery,
                base_fit: Optional[FitResult] = None) -> ThresholdPrediction:
    """Evaluate ``sup{y : eta_{n+1}(y) <= threshold}`` for one query.

    Thresholds at or above ``tau`` give ``+inf`` and thresholds below
    ``-(1 - tau)`` give ``-inf``; both are marked as sentinels.
    """
    tau = spec.tau
    t = float(query.threshold)
    if t >= tau - _EQ_SLACK:
        return ThresholdPrediction(math.inf, True, 0, (math.nan, math.nan))
    if t < -(1.0 - tau) - _EQ_SLACK:
        return ThresholdPrediction(-math.inf, True, 0, (math.nan, math.nan))
    path = DualPath(dataset, spec, config, query.x_new, base_fit)
    scale = dataset.response_scale()
    tol_y = query.tol_y if query.tol_y is not None else 1e-6 * scale
    if query.bracket is not None:
        lo, hi = query.bracket
        if not lo < hi:
            raise ValueError("bracket must satisfy lo < hi")
        center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    else:
        center, half = path.base_prediction(), 10.0 * scale
    value, _, bracket = _sup_below(path, t, center, half, tol_y)
    return ThresholdPrediction(value, False, path.probes, bracket)


def quantile_dual_threshold(dataset: Dataset, spec: ProblemSpec, config: SolverConfig,
                            x_new: ArrayLike, t: float, base_fit: Optional[FitResult] = None,
                            tol_y: Optional[float] = None) -> float:
    """``sup{y : eta_{n+1}(y) <= t}``, with infinite sentinels outside the dual box."""
    query = DualPathQuery(np.asarray(x_new, dtype=float), t, tol_y=tol_y)
    return solve_query(dataset, spec, config, query, base_fit).value


def fixed_threshold(base_fit: FitResult, tau: float) -> float:
    """Threshold ``t_hat``: the empirical ``tau``-quantile of the training duals."""
    return empirical_quantile(tau, base_fit.duals)


def fixed_threshold_predict(dataset: Dataset, spec: ProblemSpec, config: SolverConfig,
                            x_new: ArrayLike, base_fit: Optional[FitResult] = None) -> float:
    """Deterministic dual-thresholded prediction at ``t_hat``."""
    base_fit = base_fit if base_fit is not None else fit(dataset, spec, config)
    t_hat = fixed_threshold(base_fit, spec.tau)
    return quantile_dual_threshold(dataset, spec, config, x_new, t_hat, base_fit)


def randomized_gcc_predict(dataset: Dataset, spec: ProblemSpec, config: SolverConfig,
                           x_new: ArrayLike, u: float, base_fit: Optional[FitResult] = None) -> float:
    """Randomized prediction thresholded at a caller-supplied ``u`` in ``(-(1 - tau), tau)``."""
    tau = spec.tau
    if not (-(1.0 - tau) < u < tau):
        raise ValueError(f"u must lie in ({-(1 - tau)}, {tau}), got {u}")
    return quantile_dual_threshold(dataset, spec, config, x_new, u, base_fit)


def full_conformal_predict(dataset: Dataset, spec: ProblemSpec, config: SolverConfig,
                           x_new: ArrayLike, base_fit: Optional[FitResult] = None,
                           tol_y: Optional[float] = None) -> float:
    """Largest imputed label that its own augmented fit still covers.

    The sign of ``y - fitted(y)`` agrees with the sign of the imputed dual
    away from interpolation, so this is the supremum of labels whose dual
    is below ``tau``.
    """
    path = DualPath(dataset, spec, config, x_new, base_fit)
    scale = dataset.response_scale()
    tol_y = tol_y if tol_y is not None else 1e-6 * scale
    x = path.x_new
    eps = 1e-9 * scale

    def uncovered(y: float) -> float:
        res = path.fit_at(y)
        return 1.0 if y > float(res.predict(x)[0]) + eps else 0.0

    value, _, _ = _sup_below(uncovered, 0.5, path.base_prediction(), 10.0 * scale, tol_y)
    return value


def threshold_covers(dataset: Dataset, spec: ProblemSpec, config: SolverConfig, x_new: ArrayLike,
                     y_new: float, t: float, base_fit: Optional[FitResult] = None) -> bool:
    """Whether ``y_new <= sup{y : eta_{n+1}(y) <= t}``, from a single augmented fit.

    Monotonicity of the imputed dual makes the event equal to
    ``eta_{n+1}(y_new) <= t`` except on the boundary of the sup set.
    """
    if t >= spec.tau - _EQ_SLACK:
        return True
    eta = dual_at(dataset, spec, config, x_new, y_new, warm_start=base_fit)
    return eta <= t + _EQ_SLACK
