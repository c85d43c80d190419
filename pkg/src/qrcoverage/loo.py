"""Leave-one-out coverage read off dual signs, and the n-refit oracle."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .core import Dataset, DataError, FitResult, ProblemSpec
from .solver import ConvergenceError, SolverConfig, fit, fitted_value_range

EPS_SIGN = 1e-6


@dataclass(frozen=True)
class LooSummary:
    """Leave-one-out coverage of a training set.

    Attributes
    ----------
    coverage : fraction of covered samples.
    tie_count : number of samples whose coverage is ambiguous.
    per_sample_covered : boolean vector of length n.
    ties : boolean mask of the ambiguous samples.
    strict_covered, weak_covered : brute-force only.  Coverage of ``Y_i`` by
        every (strict) or by some (weak) leave-one-out solution.
    """

    coverage: float
    tie_count: int
    per_sample_covered: NDArray[np.bool_]
    ties: NDArray[np.bool_]
    strict_covered: Optional[NDArray[np.bool_]] = None
    weak_covered: Optional[NDArray[np.bool_]] = None

    @property
    def n(self) -> int:
        return self.per_sample_covered.size

    @property
    def covered_count(self) -> int:
        return int(np.sum(self.per_sample_covered))


def loo_coverage_dual(fit_result: FitResult, eps_sign: float = EPS_SIGN) -> LooSummary:
    """Leave-one-out coverage from one fit: sample ``i`` counts as covered when ``eta_i <= 0``.

    Duals within ``eps_sign`` of zero are counted as covered and reported as ties.

    >>> import numpy as np
    >>> from qrcoverage.core import Dataset, ProblemSpec
    >>> from qrcoverage.solver import fit
    >>> s = loo_coverage_dual(fit(Dataset(np.zeros((3, 0)), [1.0, 2.0, 3.0]), ProblemSpec(0.5)))
    >>> round(s.coverage, 4), s.tie_count
    (0.6667, 1)
    """
    eta = np.asarray(fit_result.duals)
    covered = eta <= eps_sign
    ties = np.abs(eta) <= eps_sign
    return LooSummary(float(np.mean(covered)), int(ties.sum()), covered, ties)


def _drop_warm(fit_result: FitResult, i: int) -> FitResult:
    return dataclasses.replace(
        fit_result,
        duals=np.delete(fit_result.duals, i),
        residuals=np.delete(fit_result.residuals, i),
    )


def loo_coverage_bruteforce(dataset: Dataset, spec: ProblemSpec, config: SolverConfig = SolverConfig(),
                            full_fit: Optional[FitResult] = None, tol: float = 1e-9) -> LooSummary:
    """Leave-one-out coverage by refitting without each sample in turn.

    ``Y_i`` is covered when it is at most the refit's fitted value at ``X_i``
    (with slack ``tol`` times the response scale).  When the refit's solution
    set is not a point, the range of fitted values over all solutions is
    computed; samples inside that range, or on the fitted value, are ties.
    """
    if dataset.n < 2:
        raise DataError("leave-one-out needs at least two samples")
    if full_fit is None:
        full_fit = fit(dataset, spec, config)
    slack = tol * dataset.response_scale()
    n = dataset.n
    covered = np.zeros(n, dtype=bool)
    strict = np.zeros(n, dtype=bool)
    weak = np.zeros(n, dtype=bool)
    ties = np.zeros(n, dtype=bool)
    for i in range(n):
        sub = dataset.drop(i)
        try:
            res = fit(sub, spec, config, warm_start=_drop_warm(full_fit, i))
        except ConvergenceError as exc:
            raise ConvergenceError(f"leave-one-out refit {i} failed: {exc}", exc.best) from exc
        xi, yi = dataset.X[i], float(dataset.y[i])
        q = float(res.predict(xi)[0])
        lo, hi = fitted_value_range(res, sub, spec, xi, tol)
        covered[i] = yi <= q + slack
        strict[i] = yi < lo - slack
        weak[i] = yi <= hi + slack
        ties[i] = weak[i] and not strict[i]
    return LooSummary(float(np.mean(covered)), int(ties.sum()), covered, ties, strict, weak)


def loo_multiaccuracy(fit_result: FitResult, dataset: Dataset, tau: float,
                      eps_sign: float = EPS_SIGN) -> float:
    """Coordinatewise normalized leave-one-out multiaccuracy error.

    ``max_j |mean(X_j * (covered - tau))| / mean(|X_j|)`` with covered
    indicators from the dual signs.  All-zero columns are skipped.
    """
    covered = loo_coverage_dual(fit_result, eps_sign).per_sample_covered
    return multiaccuracy(dataset.X, covered, tau)


def multiaccuracy(X: NDArray, covered: NDArray, target: float) -> float:
    """``max_j |mean(X_j (covered - target))| / mean(|X_j|)`` over non-zero columns."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise DataError("multiaccuracy needs at least one feature column")
    denom = np.mean(np.abs(X), axis=0)
    keep = denom > 0
    if not np.any(keep):
        raise DataError("multiaccuracy undefined: every feature column is zero")
    resid = np.asarray(covered, dtype=float) - target
    num = np.abs(X[:, keep].T @ resid) / X.shape[0]
    return float(np.max(num / denom[keep]))
