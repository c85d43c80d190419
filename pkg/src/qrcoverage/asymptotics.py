"""Deterministic asymptotic program for ridge quantile regression on Gaussian data.

In the proportional limit ``d/n -> gamma`` with ``X ~ N(0, I)``, Gaussian
noise of scale ``sigma`` and Gaussian coefficients with
``E[(sqrt(d) beta_1)^2] = B``, the fitted intercept, estimation error and
the empirical law of the duals are described by the saddle point of

    A(b0, Mu, rho1; Meta, rho2)
        = E[e_l(Z; rho1/Meta)] - Meta^2 Mu gamma / (2 rho2) + Meta rho1 / 2
          - Mu rho2 / 2 + gamma E[e_nu(x; Mu/rho2)]

minimised over ``(b0, Mu, rho1)`` and maximised over ``(Meta, rho2)``.
Here ``Z ~ N(-b0, Mu^2 + sigma^2)``, ``e_l`` is the Moreau envelope of the
pinball loss, ``nu(b) = lam gamma b^2`` with
``x ~ N(0, (Mu Meta / rho2)^2 + B / gamma)`` and ``lam`` is the ridge level
per dimension (the finite-sample penalty divided by ``d``).  All Gaussian
expectations are evaluated in closed form from truncated normal moments.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize, special

logger = logging.getLogger(__name__)

TWO_OVER_PI = 2.0 / math.pi
DEGENERATE_MU = 1e-4
_SQRT2PI = math.sqrt(2.0 * math.pi)


class AsymptoticError(RuntimeError):
    """The saddle-point solve did not converge."""

    def __init__(self, message: str, trace: Optional[list] = None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class Bounds:
    """Box constants of the program; ``None`` entries take their defaults."""

    beta0: float = 20.0
    mu: float = 20.0
    rho1: float = 50.0
    rho2: float = 50.0
    eta_lo: Optional[float] = None
    eta_hi: Optional[float] = None


@dataclass(frozen=True)
class AsymptoticProblem:
    """Inputs of the asymptotic program.

    ``lambda_scaled`` is the ridge level of the penalty ``d * lam * ||beta||^2``,
    i.e. the finite-sample ridge level divided by ``d``.
    """

    gamma: float
    tau: float
    sigma_eps: float = 1.0
    beta_second_moment: float = 1.0
    lambda_scaled: float = 0.0
    bounds: Bounds = field(default_factory=Bounds)

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma < TWO_OVER_PI):
            raise ValueError(f"gamma must lie in (0, 2/pi), got {self.gamma}")
        if not (0.0 < self.tau < 1.0):
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")
        if self.beta_second_moment < 0 or self.lambda_scaled < 0:
            raise ValueError("beta_second_moment and lambda_scaled must be >= 0")
        lo, hi = self.eta_box
        if not 0 < lo < hi:
            raise ValueError("need 0 < c_eta < C_eta")
        if lo >= math.sqrt(0.5 * min(self.tau, 1 - self.tau) ** 2):
            raise ValueError("c_eta must be below sqrt(min(tau, 1 - tau)^2 / 2)")

    @property
    def eta_box(self) -> tuple[float, float]:
        lo = self.bounds.eta_lo if self.bounds.eta_lo is not None else 0.45 * min(self.tau, 1 - self.tau)
        hi = self.bounds.eta_hi if self.bounds.eta_hi is not None else max(self.tau, 1 - self.tau)
        return lo, hi


@dataclass(frozen=True)
class AsymptoticSolution:
    beta0_star: float
    M_u_star: float
    rho1_star: float
    M_eta_star: float
    rho2_star: float
    objective_value: float
    predicted_coverage: float
    degenerate: bool
    gradient_norm: float = 0.0
    iterations: int = 0
    problem: Optional[AsymptoticProblem] = None

    @property
    def threshold_scale(self) -> float:
        """``rho1 / Meta``, the envelope parameter at the solution."""
        return self.rho1_star / self.M_eta_star


# --------------------------------------------------------------------------
# Gaussian pieces


def _phi(z):
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        return np.exp(-0.5 * z * z) / _SQRT2PI


def _partial_moments(mu: float, sd: float, a: float, b: float) -> tuple[float, float, float]:
    """``E[1{a<Z<b}]``, ``E[Z 1{a<Z<b}]`` and ``E[Z^2 1{a<Z<b}]`` for ``Z ~ N(mu, sd^2)``."""
    al = (a - mu) / sd if math.isfinite(a) else -math.inf
    be = (b - mu) / sd if math.isfinite(b) else math.inf
    m0 = float(special.ndtr(be) - special.ndtr(al))
    pa = float(_phi(al)) if math.isfinite(al) else 0.0
    pb = float(_phi(be)) if math.isfinite(be) else 0.0
    apa = al * pa if math.isfinite(al) else 0.0
    bpb = be * pb if math.isfinite(be) else 0.0
    e1 = pa - pb
    e2 = m0 + apa - bpb
    return m0, mu * m0 + sd * e1, mu * mu * m0 + 2 * mu * sd * e1 + sd * sd * e2


@dataclass(frozen=True)
class EnvelopeMoments:
    """Gaussian expectations of the pinball envelope and its derivatives at ``Z ~ N(mu, sd^2)``."""

    envelope: float  # E[e(Z; s)]
    psi_mean: float  # E[psi(Z)], psi = clip(Z / s, -(1 - tau), tau)
    psi_sq: float  # E[psi(Z)^2]
    p_interior: float  # P(-s(1-tau) < Z < s tau)
    p_upper: float
    p_lower: float


def envelope_moments(mu: float, sd: float, s: float, tau: float) -> EnvelopeMoments:
    """Closed-form Gaussian expectations of the pinball envelope with parameter ``s >= 0``."""
    if s <= 0.0:
        m_lo = _partial_moments(mu, sd, -math.inf, 0.0)
        m_hi = _partial_moments(mu, sd, 0.0, math.inf)
        env = tau * m_hi[1] - (1 - tau) * m_lo[1]
        pu, pl = m_hi[0], m_lo[0]
        return EnvelopeMoments(env, tau * pu - (1 - tau) * pl, tau ** 2 * pu + (1 - tau) ** 2 * pl, 0.0, pu, pl)
    a, b = -s * (1 - tau), s * tau
    lo = _partial_moments(mu, sd, -math.inf, a)
    mid = _partial_moments(mu, sd, a, b)
    hi = _partial_moments(mu, sd, b, math.inf)
    env = (tau * hi[1] - 0.5 * s * tau ** 2 * hi[0]
           + mid[2] / (2 * s)
           - (1 - tau) * lo[1] - 0.5 * s * (1 - tau) ** 2 * lo[0])
    psi = tau * hi[0] - (1 - tau) * lo[0] + mid[1] / s
    psi2 = tau ** 2 * hi[0] + (1 - tau) ** 2 * lo[0] + mid[2] / s ** 2
    return EnvelopeMoments(env, psi, psi2, mid[0], hi[0], lo[0])


def envelope_expectation_quadrature(mu: float, sd: float, s: float, tau: float, nodes: int = 129) -> float:
    """``E[e(Z; s)]`` by Gauss-Hermite quadrature; a cross-check of :func:`envelope_moments`."""
    from .solver import pinball_envelope

    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    return float(np.sum(w * pinball_envelope(mu + sd * x, s, tau)) / _SQRT2PI)


# --------------------------------------------------------------------------
# regularizer envelopes


def l2_envelope(x: ArrayLike, rho: float, lam: float, gamma: float):
    """Envelope of ``nu(b) = lam gamma b^2``: ``lam gamma x^2 / (1 + 2 lam gamma rho)``."""
    k = lam * gamma
    return k * np.square(x) / (1.0 + 2.0 * k * rho)


def l2_conjugate_envelope(x: ArrayLike, rho: float, lam: float, gamma: float):
    """Envelope of ``nu*(b) = b^2 / (4 lam gamma)``: ``x^2 / (4 lam gamma + 2 rho)``."""
    return np.square(x) / (4.0 * lam * gamma + 2.0 * rho)


def l1_envelope(x: ArrayLike, rho: float, lam: float, gamma: float):
    """Envelope of ``nu(b) = lam sqrt(gamma) |b|`` (a Huber function)."""
    a = lam * math.sqrt(gamma)
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    return np.where(ax > a * rho, a * ax - 0.5 * a * a * rho, x * x / (2.0 * rho))


def l1_conjugate_envelope(x: ArrayLike, rho: float, lam: float, gamma: float):
    """Envelope of the indicator of ``[-a, a]``, ``a = lam sqrt(gamma)``: squared distance over ``2 rho``."""
    a = lam * math.sqrt(gamma)
    x = np.asarray(x, dtype=float)
    return np.square(np.maximum(np.abs(x) - a, 0.0)) / (2.0 * rho)


# --------------------------------------------------------------------------
# objective and gradient


def _unpack(problem: AsymptoticProblem):
    return (problem.gamma, problem.tau, problem.sigma_eps ** 2, problem.beta_second_moment,
            problem.lambda_scaled * problem.gamma)


def objective(problem: AsymptoticProblem, beta0: float, mu: float, rho1: float,
              meta: float, rho2: float) -> float:
    """Value of the saddle objective ``A``."""
    g, tau, s2, B, k = _unpack(problem)
    em = envelope_moments(-beta0, math.sqrt(mu * mu + s2), rho1 / meta, tau)
    val = em.envelope - meta ** 2 * mu * g / (2 * rho2) + meta * rho1 / 2 - mu * rho2 / 2
    if k > 0:
        V = (mu * meta / rho2) ** 2 + B / g
        val += g * k * V / (1.0 + 2.0 * k * mu / rho2)
    return float(val)


def gradient(problem: AsymptoticProblem, beta0: float, mu: float, rho1: float,
             meta: float, rho2: float) -> NDArray[np.float64]:
    """Gradient of ``A`` in ``(beta0, Mu, rho1, Meta, rho2)``."""
    g, tau, s2, B, k = _unpack(problem)
    s = rho1 / meta
    em = envelope_moments(-beta0, math.sqrt(mu * mu + s2), s, tau)
    d_b0 = -em.psi_mean
    # Stein: E[psi(Z) g] = Mu E[psi'(Z)] = Mu P(interior) / s
    d_mu = (mu * em.p_interior / s if s > 0 else 0.0) - meta ** 2 * g / (2 * rho2) - rho2 / 2
    d_rho1 = -em.psi_sq / (2 * meta) + meta / 2
    d_meta = em.psi_sq * rho1 / (2 * meta ** 2) - meta * mu * g / rho2 + rho1 / 2
    d_rho2 = meta ** 2 * mu * g / (2 * rho2 ** 2) - mu / 2
    if k > 0:
        V = (mu * meta / rho2) ** 2 + B / g
        D = 1.0 + 2.0 * k * mu / rho2
        dV = g * k / D
        dD = -g * k * V / D ** 2
        d_mu += dV * 2 * mu * meta ** 2 / rho2 ** 2 + dD * 2 * k / rho2
        d_meta += dV * 2 * mu ** 2 * meta / rho2 ** 2
        d_rho2 += dV * (-2 * mu ** 2 * meta ** 2 / rho2 ** 3) + dD * (-2 * k * mu / rho2 ** 2)
    return np.array([d_b0, d_mu, d_rho1, d_meta, d_rho2])


# --------------------------------------------------------------------------
# saddle solve


def _inner_max(problem: AsymptoticProblem, outer, start):
    lo, hi = problem.eta_box
    bnds = [(lo, hi), (1e-10, problem.bounds.rho2)]

    def neg(v):
        return -objective(problem, *outer, v[0], v[1])

    def neg_grad(v):
        return -gradient(problem, *outer, v[0], v[1])[3:]

    res = optimize.minimize(neg, np.clip(start, [b[0] for b in bnds], [b[1] for b in bnds]),
                            jac=neg_grad, method="L-BFGS-B", bounds=bnds,
                            options={"ftol": 1e-15, "gtol": 1e-11, "maxiter": 500})
    return -res.fun, res.x


def _initial_guess(problem: AsymptoticProblem) -> NDArray[np.float64]:
    from scipy.stats import norm

    tau, g = problem.tau, problem.gamma
    sd = math.sqrt(problem.sigma_eps ** 2 + 0.25 * problem.beta_second_moment)
    b0 = float(norm.ppf(tau)) * sd
    meta = math.sqrt(tau * (1 - tau)) * 0.8
    mu = 0.5 * math.sqrt(max(problem.beta_second_moment, 0.01))
    return np.array([b0, mu, 1.0, meta, meta * math.sqrt(g)])


def _pinned(problem: AsymptoticProblem, x) -> list[str]:
    b = problem.bounds
    lo, hi = problem.eta_box
    out = []
    if abs(x[0]) >= 0.999 * b.beta0:
        out.append("beta0")
    if x[1] >= 0.999 * b.mu:
        out.append("mu")
    if x[2] >= 0.999 * b.rho1:
        out.append("rho1")
    if x[4] >= 0.999 * b.rho2:
        out.append("rho2")
    if x[3] >= hi * 0.999999 and problem.bounds.eta_hi is None and hi < 1.0:
        pass  # the upper eta bound is the largest feasible dual norm; never widened
    return out


def _solve_once(problem: AsymptoticProblem, x0, tol: float):
    trace = []
    inner = {"v": x0[3:].copy()}
    b = problem.bounds

    def outer_value(o):
        val, v = _inner_max(problem, o, inner["v"])
        inner["v"] = v
        return val

    res = optimize.minimize(outer_value, x0[:3], method="Nelder-Mead",
                            bounds=[(-b.beta0, b.beta0), (0.0, b.mu), (0.0, b.rho1)],
                            options={"xatol": tol, "fatol": 1e-14, "maxiter": 4000, "adaptive": True})
    o = res.x
    val, v = _inner_max(problem, o, inner["v"])
    x = np.concatenate([o, v])
    trace.append(("nelder-mead", x.copy(), val, int(res.nit)))
    return x, trace, int(res.nit)


def _polish_root(problem: AsymptoticProblem, x):
    """Refine an interior saddle point by solving ``grad A = 0``."""
    def fun(z):
        return gradient(problem, *z)

    sol = optimize.root(fun, x, method="hybr", options={"xtol": 1e-14})
    z = sol.x
    lo, hi = problem.eta_box
    ok = (np.all(np.isfinite(z)) and z[1] > 0 and z[2] > 0 and z[4] > 0 and lo <= z[3] <= hi
          and np.max(np.abs(fun(z))) < np.max(np.abs(fun(x))) + 1e-14)
    return (z, True) if ok else (x, False)


def solve_asymptotic(problem: AsymptoticProblem, tol: float = 1e-8, max_widenings: int = 4) -> AsymptoticSolution:
    """Saddle point of the asymptotic program.

    The outer minimisation over ``(b0, Mu, rho1)`` uses Nelder-Mead on the
    value of the inner maximisation over ``(Meta, rho2)`` (bounded
    L-BFGS-B).  An interior solution is then refined by a root solve on
    the gradient.  If the solution pins a box edge the box is doubled and
    the solve repeated, with a warning.

    Raises
    ------
    AsymptoticError
        If the solution still pins the box after ``max_widenings`` or the
        final gradient is not small.
    """
    from scipy.stats import norm

    x = _initial_guess(problem)
    trace: list = []
    iterations = 0
    for _ in range(max_widenings + 1):
        x, tr, nit = _solve_once(problem, x, tol)
        trace += tr
        iterations += nit
        pinned = _pinned(problem, x)
        if not pinned:
            break
        logger.warning("asymptotic solution pins the box at %s; widening", pinned)
        b = problem.bounds
        problem = replace(problem, bounds=replace(b, beta0=2 * b.beta0, mu=2 * b.mu,
                                                  rho1=2 * b.rho1, rho2=2 * b.rho2))
    else:
        raise AsymptoticError(f"solution pins the box at {pinned}", trace)

    degenerate = x[1] < DEGENERATE_MU
    grad_norm = math.inf
    if not degenerate:
        x, polished = _polish_root(problem, x)
        grad_norm = float(np.max(np.abs(gradient(problem, *x))))
        trace.append(("root", x.copy(), grad_norm, polished))
        if grad_norm > 1e-6:
            raise AsymptoticError(f"saddle point gradient {grad_norm:.2e} did not vanish", trace)
    else:
        x[1] = 0.0
        grad_norm = float(abs(gradient(problem, *x)[0]))
    b0, mu = float(x[0]), float(x[1])
    sd = math.sqrt(mu * mu + problem.sigma_eps ** 2)
    return AsymptoticSolution(
        beta0_star=b0, M_u_star=mu, rho1_star=float(x[2]), M_eta_star=float(x[3]),
        rho2_star=float(x[4]), objective_value=objective(problem, *x),
        predicted_coverage=float(norm.cdf(b0 / sd)), degenerate=bool(degenerate),
        gradient_norm=grad_norm, iterations=iterations, problem=problem,
    )


def rho1_fixed_point_residual(solution: AsymptoticSolution) -> float:
    """``|rho1 - sqrt(E[(Z - prox(Z; rho1/Meta))^2])|`` at the solution."""
    p = solution.problem
    sd = math.sqrt(solution.M_u_star ** 2 + p.sigma_eps ** 2)
    s = solution.threshold_scale
    em = envelope_moments(-solution.beta0_star, sd, s, p.tau)
    # Z - prox(Z; s) = s psi(Z)
    return abs(solution.rho1_star - s * math.sqrt(em.psi_sq))


def predicted_primal_limits(solution: AsymptoticSolution) -> tuple[float, float]:
    """Limits of the fitted intercept and of ``||beta_hat - beta_true||``."""
    return solution.beta0_star, solution.M_u_star


# --------------------------------------------------------------------------
# limiting dual law


@dataclass(frozen=True)
class DualLaw:
    """Limiting empirical law of the fitted duals.

    In the regular case it is the law of ``clip(Z / s, -(1 - tau), tau)``
    with ``Z ~ N(-b0, Mu^2 + sigma^2)`` and ``s = rho1 / Meta``: point
    masses at both box edges and a Gaussian density between them.  In the
    degenerate case ``Mu = 0`` it is the two-point law on the box edges.
    """

    tau: float
    mean: float
    sd: float
    scale: float
    degenerate: bool

    @property
    def mass_lower(self) -> float:
        if self.degenerate:
            return float(special.ndtr((0.0 - self.mean) / self.sd))
        return float(special.ndtr((-self.scale * (1 - self.tau) - self.mean) / self.sd))

    @property
    def mass_upper(self) -> float:
        if self.degenerate:
            return 1.0 - self.mass_lower
        return float(1.0 - special.ndtr((self.scale * self.tau - self.mean) / self.sd))

    @property
    def prob_nonpositive(self) -> float:
        """``P(eta <= 0)``, equal to ``P(Z <= 0)``."""
        return float(special.ndtr(-self.mean / self.sd))

    def cdf(self, t: ArrayLike):
        t = np.asarray(t, dtype=float)
        lo, hi = -(1 - self.tau), self.tau
        if self.degenerate:
            inner = np.full(t.shape, self.mass_lower)
        else:
            inner = special.ndtr((self.scale * t - self.mean) / self.sd)
        return np.where(t < lo, 0.0, np.where(t >= hi, 1.0, inner))

    def pdf_interior(self, t: ArrayLike):
        """Density of the continuous part on the open box."""
        t = np.asarray(t, dtype=float)
        if self.degenerate:
            return np.zeros_like(t)
        dens = self.scale * _phi((self.scale * t - self.mean) / self.sd) / self.sd
        return np.where((t > -(1 - self.tau)) & (t < self.tau), dens, 0.0)

    def quantile(self, q: ArrayLike):
        """Left-continuous inverse of :meth:`cdf`."""
        q = np.asarray(q, dtype=float)
        lo, hi = -(1 - self.tau), self.tau
        if self.degenerate:
            return np.where(q <= self.mass_lower, lo, hi)
        z = self.mean + self.sd * special.ndtri(np.clip(q, 1e-300, 1 - 1e-16))
        inner = np.clip(z / self.scale, lo, hi)
        return np.where(q <= self.mass_lower, lo, np.where(q > 1 - self.mass_upper, hi, inner))

    def sample(self, size: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng()
        z = self.mean + self.sd * rng.standard_normal(size)
        if self.degenerate:
            return np.where(z < 0, -(1 - self.tau), self.tau)
        return np.clip(z / self.scale, -(1 - self.tau), self.tau)


def limiting_dual_law(solution: AsymptoticSolution, problem: Optional[AsymptoticProblem] = None) -> DualLaw:
    """Law ``P_eta`` of the duals implied by a solved program."""
    problem = problem if problem is not None else solution.problem
    if problem is None:
        raise ValueError("the problem is required")
    if not math.isfinite(solution.gradient_norm) or solution.gradient_norm > 1e-6:
        raise AsymptoticError("solution is not converged")
    if solution.degenerate:
        return DualLaw(problem.tau, -solution.beta0_star, problem.sigma_eps, 0.0, True)
    sd = math.sqrt(solution.M_u_star ** 2 + problem.sigma_eps ** 2)
    return DualLaw(problem.tau, -solution.beta0_star, sd, solution.threshold_scale, False)
