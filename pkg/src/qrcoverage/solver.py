"""Penalized quantile regression with certified primal and dual solutions.

The fit solves

    min_{b0, beta}  sum_i pinball_tau(y_i - b0 - x_i @ beta) + lam * ||beta||^2

(or the same program with ``b0`` fixed) by ADMM on the splitting
``r = y - b0 - X beta``.  The scaled multiplier of that constraint converges
to the dual vector ``eta`` of the quantile regression.  Once the ADMM split
has identified which points are interpolated, the iterate is polished by
solving the reduced KKT system exactly, which yields duals accurate to
machine precision instead of to the ADMM tolerance.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse
from numpy.typing import ArrayLike, NDArray

from .core import Dataset, FitResult, KktCertificate, ProblemSpec

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Raised when a fit does not reach a certified solution.

    ``best`` holds the last iterate (with its certificate) for inspection.
    """

    def __init__(self, message: str, best: Optional[FitResult] = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the ADMM fit.

    ``tolerance`` bounds the certificate quantities (stationarity, duality gap
    per sample, box violation); absolute quantities are measured relative to
    the response scale.
    """

    max_iterations: int = 50_000
    tolerance: float = 1e-9
    admm_rho: float = 1.0
    warm_start: Optional[FitResult] = None
    polish: bool = True
    polish_every: int = 20
    max_rho_updates: int = 10
    relaxation: float = 1.6
    kkt_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if not self.admm_rho > 0:
            raise ValueError("admm_rho must be > 0")

    def with_warm_start(self, warm: Optional[FitResult]) -> "SolverConfig":
        return dataclasses.replace(self, warm_start=warm)


# --------------------------------------------------------------------------
# pinball primitives


def pinball_loss(r: ArrayLike, tau: float) -> NDArray[np.float64]:
    """``tau * r - min(r, 0)``, elementwise."""
    r = np.asarray(r, dtype=float)
    return tau * r - np.minimum(r, 0.0)


def pinball_prox(x: ArrayLike, rho: float, tau: float):
    """Proximal map ``argmin_v pinball_tau(v) + (v - x)^2 / (2 rho)``.

    Soft-thresholding with the asymmetric dead zone ``[-rho (1 - tau), rho tau]``.
    """
    if not rho > 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    x = np.asarray(x, dtype=float)
    out = np.where(x > rho * tau, x - rho * tau, np.where(x < -rho * (1.0 - tau), x + rho * (1.0 - tau), 0.0))
    return float(out) if out.ndim == 0 else out


def pinball_envelope(x: ArrayLike, rho: float, tau: float):
    """Moreau envelope ``min_v pinball_tau(v) + (v - x)^2 / (2 rho)``.

    ``rho = 0`` returns the loss itself (the continuous extension).
    """
    if not rho >= 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("pinball_envelope requires finite input")
    if rho == 0:
        out = pinball_loss(x, tau)
    else:
        upper = x > rho * tau
        lower = x < -rho * (1.0 - tau)
        out = np.where(
            upper,
            tau**2 * rho / 2 + tau * (x - rho * tau),
            np.where(lower, (1 - tau) ** 2 * rho / 2 - (1 - tau) * (x + rho * (1 - tau)), x**2 / (2 * rho)),
        )
    return float(out) if np.ndim(out) == 0 else out


def pinball_subgradient_distance(eta: NDArray, r: NDArray, tau: float, band: float) -> NDArray:
    """Distance of ``eta_i`` from ``subgrad pinball(r_i)``; residuals within ``band`` count as zero."""
    lo, hi = -(1.0 - tau), tau
    box = np.maximum(np.maximum(lo - eta, eta - hi), 0.0)
    return np.where(r > band, np.abs(eta - hi), np.where(r < -band, np.abs(eta - lo), box))


# --------------------------------------------------------------------------
# problem assembly


@dataclass
class _Problem:
    A: NDArray  # n x p design (leading ones column when the intercept is free)
    y: NDArray  # response, minus the offset when it is fixed
    pen: NDArray  # diagonal of the ridge matrix P
    tau: float
    offset: float
    free_intercept: bool
    scale: float

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.A.shape[1]


def _assemble(dataset: Dataset, spec: ProblemSpec) -> _Problem:
    X = dataset.X
    if spec.jitter > 0:
        rng = np.random.default_rng(spec.jitter_seed)
        X = X + spec.jitter * rng.standard_normal(X.shape)
    scale = dataset.response_scale()
    if spec.free_intercept:
        A = np.hstack([np.ones((dataset.n, 1)), X])
        pen = np.concatenate([[0.0], np.full(dataset.d, spec.lam)])
        return _Problem(A, dataset.y.copy(), pen, spec.tau, 0.0, True, scale)
    c = spec.intercept.c
    return _Problem(X.copy(), dataset.y - c, np.full(dataset.d, spec.lam), spec.tau, c, False, scale)


def _certificate(prob: _Problem, w, eta, r_split, tol, rank_deficient=False, polished=False) -> KktCertificate:
    tau = prob.tau
    resid = prob.y - prob.A @ w
    primal = float(np.max(np.abs(r_split - resid), initial=0.0))
    box = float(np.max(np.maximum(np.maximum(-(1 - tau) - eta, eta - tau), 0.0), initial=0.0))
    gap = pinball_loss(resid, tau) - eta * resid
    stat = prob.A.T @ eta - 2.0 * prob.pen * w
    slack = pinball_subgradient_distance(eta, resid, tau, tol * prob.scale)
    return KktCertificate(
        primal_residual=primal,
        dual_residual=box,
        duality_gap_per_sample=float(np.mean(gap)),
        stationarity_norm=float(np.max(np.abs(stat), initial=0.0)),
        slackness_violation=float(np.max(slack, initial=0.0)),
        tol=tol,
        rank_deficient=rank_deficient,
        polished=polished,
    )


def _certified(cert: KktCertificate, prob: _Problem) -> bool:
    tol = cert.tol
    stat_scale = max(1.0, float(np.max(np.abs(prob.A), initial=0.0))) * max(1.0, np.sqrt(prob.n))
    return (
        cert.primal_residual <= tol * prob.scale
        and cert.dual_residual <= tol
        and cert.duality_gap_per_sample <= tol * prob.scale
        and cert.stationarity_norm <= tol * stat_scale
        and cert.slackness_violation <= tol
    )


def _to_result(prob: _Problem, w, eta, cert, iterations, rho) -> FitResult:
    resid = prob.y - prob.A @ w
    eta = np.clip(eta, -(1.0 - prob.tau), prob.tau)
    if prob.free_intercept:
        b0, beta = float(w[0]), np.array(w[1:])
    else:
        b0, beta = prob.offset, np.array(w)
    lam = float(prob.pen[-1]) if prob.pen.size else 0.0
    return FitResult(b0, beta, resid, eta, cert, prob.tau, lam, prob.free_intercept, iterations, rho)


# --------------------------------------------------------------------------
# exact polish on an identified active set


def _polish(prob: _Problem, w, interp, eta_fixed, tol):
    """Solve the KKT system with the interpolated set ``interp`` held fixed.

    For the interpolated rows ``A_E w = y_E``; stationarity gives
    ``A_E^T eta_E - 2 P w = -A_N^T eta_N``.  The system is square in
    ``(w, eta_E)``; a least-squares correction from the current ``w`` keeps
    the iterate where the solution set is not a point.  Returns
    ``(w, eta)`` or ``None`` when the resulting pair is not optimal.
    """
    tau = prob.tau
    lo, hi = -(1.0 - tau), tau
    A, y = prob.A, prob.y
    E = np.flatnonzero(interp)
    N = np.flatnonzero(~interp)
    m, p = E.size, prob.p
    AE = A[E]
    K = np.zeros((m + p, p + m))
    K[:m, :p] = AE
    K[m:, :p] = -2.0 * np.diag(prob.pen)
    K[m:, p:] = AE.T
    rhs = np.concatenate([y[E], -A[N].T @ eta_fixed[N]])
    eta0 = eta_fixed[E]
    x0 = np.concatenate([w, eta0])
    b = rhs - K @ x0
    with warnings.catch_warnings(), np.errstate(all="ignore"):
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            delta = scipy.linalg.solve(K, b, check_finite=False)
            if not np.all(np.isfinite(delta)):
                raise np.linalg.LinAlgError
        except (np.linalg.LinAlgError, ValueError, scipy.linalg.LinAlgWarning):
            try:
                delta, *_ = scipy.linalg.lstsq(K, b, lapack_driver="gelsy")
            except (np.linalg.LinAlgError, ValueError):
                return None
    x = x0 + delta
    if np.max(np.abs(K @ x - rhs), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(rhs), initial=0.0)):
        return None
    w_new = x[:p]
    eta = eta_fixed.copy()
    eta[E] = x[p:]
    band = 1e-12 * max(1.0, np.max(np.abs(eta), initial=0.0)) + 1e-13
    if np.any(eta < lo - band) or np.any(eta > hi + band):
        return None
    eta = np.clip(eta, lo, hi)
    resid = y - A @ w_new
    rtol = tol * prob.scale
    up = eta[N] >= hi
    if np.any(resid[N][up] < -rtol) or np.any(resid[N][~up] > rtol):
        return None
    return w_new, eta


def _classify_fixed(prob: _Problem, r, eta):
    """Fixed dual values for non-interpolated points from the residual sign."""
    hi, lo = prob.tau, -(1.0 - prob.tau)
    return np.where(r > 0, hi, np.where(r < 0, lo, eta))


def _try_polish(prob, w, r_split, eta, tol, interp=None):
    if interp is None:
        interp = r_split == 0.0
    fixed = _classify_fixed(prob, r_split, eta)
    got = _polish(prob, w, interp, fixed, tol)
    if got is None and np.count_nonzero(interp) == prob.p + 1:
        got = _polish_degenerate(prob, w, interp, fixed, tol)
    return got


def _polish_degenerate(prob, w, interp, fixed, tol, max_tries=4):
    """Polish when one point too many looks interpolated.

    Near a breakpoint of a parametric path ``p + 1`` points lie almost on
    one hyperplane and the optimum interpolates ``p`` of them.  With ``z``
    spanning the left null space of ``A_E``, dropping point ``k`` leaves it
    the residual ``z @ y_E / z_k`` and the duals of ``E`` move along
    ``eta_E + t z``; candidates whose dual line stays in the box are tried.
    """
    lo, hi = -(1.0 - prob.tau), prob.tau
    E = np.flatnonzero(interp)
    N = np.flatnonzero(~interp)
    AE = prob.A[E]
    try:
        U, sv, _ = np.linalg.svd(AE, full_matrices=True)
    except np.linalg.LinAlgError:
        return None
    z = U[:, -1]
    rhs = 2.0 * prob.pen * w - prob.A[N].T @ fixed[N]
    eta_part, *_ = np.linalg.lstsq(AE.T, rhs, rcond=None)
    zy = float(z @ prob.y[E])
    scores = []
    for j, k in enumerate(E):
        if abs(z[j]) < 1e-12:
            continue
        edge = hi if zy / z[j] > 0 else lo
        eta_E = eta_part + ((edge - eta_part[j]) / z[j]) * z
        viol = float(np.max(np.maximum(np.maximum(lo - eta_E, eta_E - hi), 0.0)))
        scores.append((viol, j, k, edge))
    scores.sort()
    for viol, j, k, edge in scores[:max_tries]:
        sub = interp.copy()
        sub[k] = False
        eta = fixed.copy()
        eta[k] = edge
        got = _polish(prob, w, sub, eta, tol)
        if got is not None:
            return got
    return None


def _lp_vertex(prob: _Problem):
    """Exact solution of the unpenalized program as a linear program (HiGHS).

    Used when ADMM stalls on a degenerate optimal face, which happens only
    without a ridge term.  Returns ``None`` if the solver fails.
    """
    n, p = prob.n, prob.p
    tau = prob.tau
    # variables: w (free), r+ >= 0, r- >= 0 with A w + r+ - r- = y
    c = np.concatenate([np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)])
    eye = scipy.sparse.identity(n, format="csr")
    A_eq = scipy.sparse.hstack([scipy.sparse.csr_matrix(prob.A), eye, -eye], format="csr")
    bounds = [(None, None)] * p + [(0.0, None)] * (2 * n)
    res = scipy.optimize.linprog(c, A_eq=A_eq, b_eq=prob.y, bounds=bounds, method="highs",
                                 options={"primal_feasibility_tolerance": 1e-10,
                                          "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        return None
    w = res.x[:p]
    eta = np.clip(np.asarray(res.eqlin.marginals, dtype=float), -(1.0 - tau), tau)
    return w, eta


def _lp_fallback(prob: _Problem, tol, rank_deficient, iterations, rho) -> Optional[FitResult]:
    got = _lp_vertex(prob)
    if got is None:
        return None
    resid = prob.y - prob.A @ got[0]
    # snap float noise on interpolated rows to an exact zero residual
    r_split = np.where(np.abs(resid) <= 1e-9 * prob.scale, 0.0, resid)
    cert = _certificate(prob, got[0], got[1], r_split, tol, rank_deficient, polished=True)
    if not _certified(cert, prob):
        logger.debug("LP fallback not certified: %s", cert)
        return None
    return _to_result(prob, got[0], got[1], cert, iterations, rho)


# --------------------------------------------------------------------------
# ADMM


class _Factor:
    """Cached solve with ``A^T A + (2 / rho) P``; falls back to a pseudo-inverse."""

    def __init__(self, AtA, pen, rho):
        M = AtA + (2.0 / rho) * np.diag(pen)
        self.rank_deficient = False
        try:
            self._cho = scipy.linalg.cho_factor(M, check_finite=False)
            # cho_factor happily factors nearly singular matrices
            diag = np.abs(np.diag(self._cho[0]))
            if diag.size and diag.min() < 1e-7 * max(1.0, diag.max()):
                raise np.linalg.LinAlgError
            self._pinv = None
        except np.linalg.LinAlgError:
            self.rank_deficient = True
            self._cho = None
            self._pinv = np.linalg.pinv(M, rcond=1e-12, hermitian=True)

    def solve(self, b):
        if self._cho is not None:
            return scipy.linalg.cho_solve(self._cho, b, check_finite=False)
        return self._pinv @ b


def _initial_point(prob: _Problem, warm: Optional[FitResult]):
    n, p = prob.n, prob.p
    tau = prob.tau
    if warm is not None:
        w = warm.coefficients if prob.free_intercept else np.array(warm.beta)
        if w.size == p:
            eta = np.zeros(n)
            k = min(n, warm.duals.size)
            eta[:k] = warm.duals[:k]
            r = prob.y - prob.A @ w
            if k < n:
                eta[k:] = np.where(r[k:] > 0, tau, -(1 - tau))
            return w.astype(float), r, eta, warm.admm_rho
    AtA = prob.A.T @ prob.A
    reg = np.diag(prob.pen) + 1e-8 * np.eye(p) * max(1.0, np.trace(AtA) / max(p, 1))
    w = np.linalg.solve(AtA + reg, prob.A.T @ prob.y) if p else np.zeros(0)
    r = prob.y - prob.A @ w
    eta = np.where(r > 0, tau, -(1 - tau))
    return w, r, eta, None


def _solve(prob: _Problem, config: SolverConfig, warm: Optional[FitResult]) -> FitResult:
    tau = prob.tau
    tol = config.tolerance
    n, p = prob.n, prob.p

    if p == 0:
        r = prob.y.copy()
        eta = np.where(r > 0, tau, np.where(r < 0, -(1 - tau), 0.0))
        w = np.zeros(0)
        cert = _certificate(prob, w, eta, r, tol, polished=True)
        return _to_result(prob, w, eta, cert, 0, config.admm_rho)

    w, r, eta, warm_rho = _initial_point(prob, warm)
    rho = warm_rho if warm_rho is not None else config.admm_rho

    if config.polish and warm is not None:
        interp = (np.abs(r) <= 1e-9 * prob.scale) | ((eta > -(1 - tau) + 1e-9) & (eta < tau - 1e-9))
        got = _try_polish(prob, w, np.where(interp, 0.0, r), eta, tol, interp)
        if got is not None:
            cert = _certificate(prob, got[0], got[1], prob.y - prob.A @ got[0], tol, polished=True)
            if _certified(cert, prob):
                return _to_result(prob, got[0], got[1], cert, 0, rho)

    A, y = prob.A, prob.y
    AtA = A.T @ A
    factor = _Factor(AtA, prob.pen, rho)
    rank_deficient = factor.rank_deficient
    u = -eta / rho
    r = pinball_prox(y - A @ w - u, 1.0 / rho, tau) if n else r
    rho_updates = 0
    eps_abs, eps_rel = tol, tol
    relax = config.relaxation
    last_pattern = None
    attempted = None
    ynorm = np.linalg.norm(y)
    # a stalled unpenalized fit sits on a degenerate LP face; hand it to HiGHS
    lp_at = None
    if not np.any(prob.pen):
        lp_at = min(2000, config.max_iterations) if n * p <= 100_000 else config.max_iterations

    for it in range(1, config.max_iterations + 1):
        w = factor.solve(A.T @ (y - r - u))
        Aw = A @ w
        r_old = r
        Aw_rel = relax * Aw + (1.0 - relax) * (y - r_old)
        r = pinball_prox(y - Aw_rel - u, 1.0 / rho, tau)
        u = u + r + Aw_rel - y
        prim_vec = r + Aw - y

        if config.polish and (it % config.polish_every == 0):
            # only polish once the interpolated set has settled
            pattern = np.sign(r).astype(np.int8).tobytes()
            stable = pattern == last_pattern and pattern != attempted
            last_pattern = pattern
            got = None
            if stable:
                attempted = pattern
                got = _try_polish(prob, w, r, -rho * u, tol)
            if got is not None:
                cert = _certificate(prob, got[0], got[1], prob.y - prob.A @ got[0], tol,
                                    rank_deficient=rank_deficient, polished=True)
                if _certified(cert, prob):
                    return _to_result(prob, got[0], got[1], cert, it, rho)

        if it == lp_at:
            lp_at = None
            got = _lp_fallback(prob, tol, rank_deficient, it, rho)
            if got is not None:
                return got

        if it % 10 == 0:
            prim = np.linalg.norm(prim_vec)
            dual = rho * np.linalg.norm(A.T @ (r - r_old))
            eps_p = eps_abs * np.sqrt(n) + eps_rel * max(np.linalg.norm(Aw), np.linalg.norm(r), ynorm)
            eps_d = eps_abs * np.sqrt(p) + eps_rel * rho * np.linalg.norm(A.T @ u)
            if prim <= eps_p and dual <= eps_d:
                eta = -rho * u
                cert = _certificate(prob, w, eta, r, tol, rank_deficient=rank_deficient)
                if _certified(cert, prob):
                    return _to_result(prob, w, eta, cert, it, rho)
            if rho_updates < config.max_rho_updates and it % 50 == 0:
                if prim > 10.0 * dual:
                    rho *= 2.0
                    u /= 2.0
                elif dual > 10.0 * prim:
                    rho /= 2.0
                    u *= 2.0
                else:
                    continue
                rho_updates += 1
                factor = _Factor(AtA, prob.pen, rho)

    eta = -rho * u
    if lp_at is not None:
        got = _lp_fallback(prob, tol, rank_deficient, config.max_iterations, rho)
        if got is not None:
            return got
    cert = _certificate(prob, w, eta, r, tol, rank_deficient=rank_deficient)
    best = _to_result(prob, w, eta, cert, config.max_iterations, rho)
    raise ConvergenceError(
        f"ADMM did not certify a solution in {config.max_iterations} iterations "
        f"(stationarity {cert.stationarity_norm:.2e}, gap {cert.duality_gap_per_sample:.2e})",
        best,
    )


def fit(dataset: Dataset, spec: ProblemSpec, config: SolverConfig = SolverConfig(),
        warm_start: Optional[FitResult] = None) -> FitResult:
    """Fit a ridge-penalized quantile regression and return a certified primal-dual pair.

    Parameters
    ----------
    dataset : training data.
    spec : quantile level, ridge level and intercept handling.
    config : solver settings.
    warm_start : previous fit to start from; overrides ``config.warm_start``.

    Raises
    ------
    ConvergenceError
        If no certified solution is found within ``config.max_iterations``.
    """
    warm = warm_start if warm_start is not None else config.warm_start
    prob = _assemble(dataset, spec)
    return _solve(prob, config, warm)


def fit_augmented(dataset: Dataset, spec: ProblemSpec, config: SolverConfig, x_new: ArrayLike,
                  y_guess: float, warm_start: Optional[FitResult] = None) -> FitResult:
    """Fit on the training data plus the imputed point ``(x_new, y_guess)``.

    The returned duals have ``n + 1`` entries; the last one belongs to the
    imputed point.  Without a warm start the fit on the training data alone
    is used as one, which keeps far-out imputed labels well conditioned.
    """
    x_new = np.asarray(x_new, dtype=float).reshape(-1)
    if x_new.size != dataset.d:
        raise ValueError(f"x_new has {x_new.size} entries, expected {dataset.d}")
    if not np.isfinite(y_guess):
        raise ValueError("y_guess must be finite")
    if warm_start is None and config.warm_start is None:
        warm_start = fit(dataset, spec, config)
    return fit(dataset.append(x_new, float(y_guess)), spec, config, warm_start)


def fitted_value_range(fit_result: FitResult, dataset: Dataset, spec: ProblemSpec,
                       x: ArrayLike, tol: float = 1e-9) -> tuple[float, float]:
    """Range of ``b0 + x @ beta`` over all primal solutions of the same program.

    Every primal solution is complementary to the returned dual, so the
    solution set is the polyhedron cut out by the residual signs the dual
    prescribes and by ridge stationarity.  Where that set is a single point
    (the common case) both ends coincide.
    """
    from scipy.optimize import linprog

    prob = _assemble(dataset, spec)
    x = np.asarray(x, dtype=float).reshape(-1)
    a = np.concatenate([[1.0], x]) if prob.free_intercept else x
    w = fit_result.coefficients if prob.free_intercept else fit_result.beta
    base = float(a @ w) + (0.0 if prob.free_intercept else prob.offset)
    p = prob.p
    if p == 0:
        return base, base
    tau = prob.tau
    eta = fit_result.duals
    eps = 1e-9
    interp = (eta > -(1 - tau) + eps) & (eta < tau - eps)
    E = np.flatnonzero(interp)
    null_rows = [prob.A[E]]
    pen_rows = np.flatnonzero(prob.pen > 0)
    if pen_rows.size:
        null_rows.append(np.eye(p)[pen_rows])
    Mfix = np.vstack(null_rows)
    # the solution is unique when the equality rows pin every coordinate
    if Mfix.shape[0] and np.linalg.matrix_rank(Mfix, tol=1e-9) == p:
        return base, base
    up = np.flatnonzero(eta >= tau - eps)
    down = np.flatnonzero(eta <= -(1 - tau) + eps)
    slack = tol * prob.scale
    A_ub = np.vstack([prob.A[up], -prob.A[down]]) if (up.size + down.size) else None
    b_ub = np.concatenate([prob.y[up] + slack, -prob.y[down] + slack]) if A_ub is not None else None
    A_eq = Mfix if Mfix.shape[0] else None
    b_eq = np.concatenate([prob.y[E], w[pen_rows]]) if A_eq is not None else None
    out = []
    for sign in (1.0, -1.0):
        res = linprog(sign * a, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                      bounds=[(None, None)] * p, method="highs")
        if res.status != 0:
            return base, base
        out.append(sign * res.fun + (0.0 if prob.free_intercept else prob.offset))
    return float(min(out[0], base)), float(max(out[1], base))
