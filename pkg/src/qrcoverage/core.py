"""Domain types, dataset handling and the empirical quantile convention."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray


class DataError(ValueError):
    """Raised for malformed or non-finite input data."""


@dataclass(frozen=True)
class Normalization:
    """Per-column affine maps recorded by :func:`normalize`."""

    feature_mean: NDArray[np.float64]
    feature_scale: NDArray[np.float64]
    response_mean: float
    response_scale: float


@dataclass(frozen=True)
class Dataset:
    """Feature matrix ``X`` (n x d) and response vector ``y`` (n,).

    Arrays are copied and made read-only on construction so that a dataset
    can be shared between fits without defensive copies.
    """

    X: NDArray[np.float64]
    y: NDArray[np.float64]
    normalization: Optional[Normalization] = None
    feature_names: Optional[tuple[str, ...]] = None

    def __post_init__(self) -> None:
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else np.zeros((y.size, 0))
        if X.ndim != 2:
            raise DataError("features must be a 2-d array")
        if X.shape[0] != y.size:
            raise DataError(f"features have {X.shape[0]} rows but response has {y.size}")
        if y.size < 1:
            raise DataError("dataset must contain at least one sample")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite values")
        if self.normalization is not None:
            if np.any(self.normalization.feature_scale <= 0) or self.normalization.response_scale <= 0:
                raise DataError("normalization scales must be positive")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, rows: ArrayLike) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.X[rows], self.y[rows], self.normalization, self.feature_names)

    def drop(self, i: int) -> "Dataset":
        keep = np.ones(self.n, dtype=bool)
        keep[i] = False
        return self.subset(keep)

    def append(self, x: ArrayLike, y: float) -> "Dataset":
        x = np.asarray(x, dtype=float).reshape(1, self.d)
        return Dataset(np.vstack([self.X, x]), np.append(self.y, y), self.normalization,
                       self.feature_names)

    def response_scale(self) -> float:
        """A positive scale for the response used to set absolute tolerances."""
        s = float(np.std(self.y)) if self.n > 1 else 0.0
        return s if s > 0 else max(1.0, float(np.max(np.abs(self.y))))


@dataclass(frozen=True)
class FreeIntercept:
    """Fit an unpenalized intercept alongside the slope."""


@dataclass(frozen=True)
class FixedOffset:
    """Hold the intercept fixed at ``c`` (the intercept-less fit used by additive adjustment)."""

    c: float


InterceptMode = Union[FreeIntercept, FixedOffset]


@dataclass(frozen=True)
class ProblemSpec:
    """Quantile level, ridge level and intercept handling for one fit.

    The objective is ``sum_i pinball_tau(y_i - b0 - x_i @ beta) + lam * ||beta||^2``.
    ``jitter`` adds independent Gaussian noise of that standard deviation to
    the features before fitting (off by default).
    """

    tau: float
    lam: float = 0.0
    intercept: InterceptMode = field(default_factory=FreeIntercept)
    jitter: float = 0.0
    jitter_seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.tau < 1.0):
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not (self.lam >= 0.0 and math.isfinite(self.lam)):
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if not (self.jitter >= 0.0):
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")
        if isinstance(self.intercept, FixedOffset) and not math.isfinite(self.intercept.c):
            raise ValueError("fixed offset must be finite")

    @property
    def free_intercept(self) -> bool:
        return isinstance(self.intercept, FreeIntercept)

    def with_tau(self, tau: float) -> "ProblemSpec":
        return ProblemSpec(tau, self.lam, self.intercept, self.jitter, self.jitter_seed)

    def with_lam(self, lam: float) -> "ProblemSpec":
        return ProblemSpec(self.tau, lam, self.intercept, self.jitter, self.jitter_seed)

    def with_offset(self, c: float) -> "ProblemSpec":
        return ProblemSpec(self.tau, self.lam, FixedOffset(float(c)), self.jitter, self.jitter_seed)


@dataclass(frozen=True)
class KktCertificate:
    """Optimality certificate of a fitted primal-dual pair.

    Attributes
    ----------
    primal_residual : max |r_split + A w - y| of the ADMM splitting (0 once polished).
    dual_residual : max violation of the dual box ``-(1-tau) <= eta <= tau``.
    duality_gap_per_sample : ``mean_i(pinball(r_i) - eta_i r_i)``; each term is
        >= 0 for a box-feasible dual, so this is the per-sample duality gap.
    stationarity_norm : ``max |A^T eta - 2 P w|`` including the intercept row.
    slackness_violation : worst distance of ``eta_i`` from the subdifferential of
        the pinball loss at ``r_i`` outside a residual band of ``tol``.
    """

    primal_residual: float
    dual_residual: float
    duality_gap_per_sample: float
    stationarity_norm: float
    slackness_violation: float = 0.0
    tol: float = 1e-9
    rank_deficient: bool = False
    polished: bool = False

    def satisfied(self, tol: Optional[float] = None, scale: float = 1.0) -> bool:
        tol = self.tol if tol is None else tol
        return (
            self.primal_residual <= tol * scale
            and self.dual_residual <= tol
            and self.duality_gap_per_sample <= tol * scale
            and self.stationarity_norm <= tol * scale
            and self.slackness_violation <= tol
        )


@dataclass(frozen=True)
class FitResult:
    """Primal and dual solution of a penalized quantile regression.

    ``duals`` follow the sign convention ``eta_i in subgrad pinball(r_i)``, so
    ``eta_i = tau`` for points above the fit and ``-(1 - tau)`` below it.
    """

    intercept: float
    beta: NDArray[np.float64]
    residuals: NDArray[np.float64]
    duals: NDArray[np.float64]
    kkt: KktCertificate
    tau: float
    lam: float
    free_intercept: bool
    iterations: int = 0
    admm_rho: float = 1.0

    @property
    def n(self) -> int:
        return self.duals.size

    @property
    def objective(self) -> float:
        from .solver import pinball_loss

        return float(np.sum(pinball_loss(self.residuals, self.tau)) + self.lam * self.beta @ self.beta)

    def predict(self, X: ArrayLike) -> NDArray[np.float64]:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        return self.intercept + X @ self.beta

    @property
    def coefficients(self) -> NDArray[np.float64]:
        return np.concatenate([[self.intercept], self.beta])


def empirical_quantile(level: float, values: ArrayLike) -> float:
    """Left-continuous empirical quantile ``inf{t : F_n(t) >= level}``.

    This is the order statistic ``v_(ceil(level * n))``.

    >>> empirical_quantile(0.9, range(1, 11))
    9.0
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise ValueError("empirical_quantile of an empty sample")
    if not np.all(np.isfinite(v)):
        raise ValueError("empirical_quantile requires finite values")
    if not (0.0 < level < 1.0):
        raise ValueError(f"level must lie in (0, 1), got {level}")
    k = math.ceil(level * v.size - 1e-12)
    k = min(max(k, 1), v.size)
    return float(np.partition(v, k - 1)[k - 1])


def normalize(dataset: Dataset) -> Dataset:
    """Center every column and scale it to unit sample variance.

    Constant columns keep scale 1 so indicator-free CSVs survive.
    """
    X, y = dataset.X, dataset.y
    mu = X.mean(axis=0) if dataset.d else np.zeros(0)
    sd = X.std(axis=0, ddof=1) if dataset.n > 1 and dataset.d else np.ones(dataset.d)
    sd = np.where(sd > 0, sd, 1.0)
    my = float(y.mean())
    sy = float(y.std(ddof=1)) if dataset.n > 1 else 0.0
    sy = sy if sy > 0 else 1.0
    norm = Normalization(mu, sd, my, sy)
    return Dataset((X - mu) / sd, (y - my) / sy, norm, dataset.feature_names)


def denormalize(dataset: Dataset) -> Dataset:
    """Invert :func:`normalize` using the stored column maps."""
    norm = dataset.normalization
    if norm is None:
        return dataset
    X = dataset.X * norm.feature_scale + norm.feature_mean
    y = dataset.y * norm.response_scale + norm.response_mean
    return Dataset(X, y, None, dataset.feature_names)


def read_csv(path: str, response: str, features: Optional[Sequence[str]] = None) -> Dataset:
    """Load a numeric CSV with a header row.

    Raises
    ------
    DataError
        If the response column is missing, a value is empty or non-numeric.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    if response not in header:
        raise DataError(f"{path}: response column {response!r} not found")
    cols = [h for h in header if h != response] if features is None else list(features)
    missing = [c for c in cols if c not in header]
    if missing:
        raise DataError(f"{path}: unknown feature columns {missing}")
    index = {h: j for j, h in enumerate(header)}
    data = np.empty((len(rows), len(cols) + 1))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"{path}: line {i + 2} has {len(row)} fields, expected {len(header)}")
        for j, name in enumerate([response, *cols]):
            raw = row[index[name]].strip()
            try:
                val = float(raw)
            except ValueError:
                raise DataError(f"{path}: line {i + 2}, column {name!r}: non-numeric value {raw!r}") from None
            if not math.isfinite(val):
                raise DataError(f"{path}: line {i + 2}, column {name!r}: missing or non-finite value")
            data[i, j] = val
    return Dataset(data[:, 1:], data[:, 0], feature_names=tuple(cols))
