import math

import numpy as np
import pytest
from scipy.stats import norm

from qrcoverage.asymptotics import (
    AsymptoticError,
    AsymptoticProblem,
    AsymptoticSolution,
    DualLaw,
    envelope_expectation_quadrature,
    envelope_moments,
    l2_conjugate_envelope,
    l2_envelope,
    limiting_dual_law,
    objective,
    predicted_primal_limits,
    rho1_fixed_point_residual,
    solve_asymptotic,
)
from qrcoverage.solver import pinball_envelope, pinball_prox


@pytest.fixture(scope="module")
def solved():
    problem = AsymptoticProblem(gamma=0.2, tau=0.9)
    return problem, solve_asymptotic(problem)


@pytest.mark.parametrize("mu,sd,s,tau", [(-1.1, 1.3, 0.4, 0.9), (0.5, 0.7, 2.0, 0.3), (0.0, 1.0, 0.0, 0.5)])
def test_envelope_expectation_closed_form(mu, sd, s, tau):
    em = envelope_moments(mu, sd, s, tau)
    # the envelope has a kink in its second derivative, so Gauss-Hermite converges slowly
    assert em.envelope == pytest.approx(envelope_expectation_quadrature(mu, sd, s, tau), abs=5e-3)
    z = mu + sd * np.random.default_rng(0).standard_normal(1_000_000)
    vals = pinball_envelope(z, s, tau)
    assert abs(em.envelope - vals.mean()) <= 3 * vals.std() / 1000
    if s > 0:
        psi = np.clip(z / s, -(1 - tau), tau)
        assert abs(em.psi_mean - psi.mean()) <= 3 * psi.std() / 1000


def test_envelope_expectation_exact_median_case():
    # s = 0 and tau = 1/2: E[|Z|] / 2 = sd / sqrt(2 pi)
    assert envelope_moments(0.0, 1.7, 0.0, 0.5).envelope == pytest.approx(1.7 / math.sqrt(2 * math.pi), abs=1e-14)


def test_l2_envelope_identity():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x, rho, lam, gamma = rng.normal(0, 3), rng.uniform(0.01, 5), rng.uniform(0.01, 5), rng.uniform(0.01, 0.6)
        total = l2_envelope(x, rho, lam, gamma) + l2_conjugate_envelope(x / rho, 1 / rho, lam, gamma)
        assert total == pytest.approx(x * x / (2 * rho), abs=1e-10)


def test_pinball_envelope_identity():
    # the conjugate of the pinball loss is the indicator of [-(1 - tau), tau]
    rng = np.random.default_rng(2)
    for _ in range(100):
        x, rho, tau = rng.normal(0, 3), rng.uniform(0.01, 5), rng.uniform(0.05, 0.95)
        y = x / rho
        conj = (y - np.clip(y, -(1 - tau), tau)) ** 2 * rho / 2
        assert pinball_envelope(x, rho, tau) + conj == pytest.approx(x * x / (2 * rho), abs=1e-10)
        assert x - pinball_prox(x, rho, tau) == pytest.approx(rho * np.clip(y, -(1 - tau), tau), abs=1e-12)


def test_gamma_0_2_undercovers(solved):
    problem, sol = solved
    assert sol.gradient_norm <= 1e-6
    assert not sol.degenerate
    assert sol.predicted_coverage < 0.9
    assert sol.predicted_coverage == pytest.approx(norm.cdf(sol.beta0_star / math.hypot(sol.M_u_star, 1.0)))
    assert rho1_fixed_point_residual(sol) <= 1e-6
    assert predicted_primal_limits(sol) == (sol.beta0_star, sol.M_u_star)


def test_saddle_curvature(solved):
    problem, sol = solved
    x0 = np.array([sol.beta0_star, sol.M_u_star, sol.rho1_star, sol.M_eta_star, sol.rho2_star])
    f = lambda x: objective(problem, *x)
    rng = np.random.default_rng(3)
    h = 1e-3
    for _ in range(10):
        for block, sign in (((0, 1, 2), 1), ((3, 4), -1)):
            v = np.zeros(5)
            v[list(block)] = rng.standard_normal(len(block))
            v /= np.linalg.norm(v)
            second = (f(x0 + h * v) - 2 * f(x0) + f(x0 - h * v)) / h ** 2
            # convex in (beta0, Mu, rho1), concave in (Meta, rho2)
            assert sign * second >= -1e-6


def test_classical_limit():
    tau = 0.9
    sol = solve_asymptotic(AsymptoticProblem(gamma=0.001, tau=tau))
    z = norm.ppf(tau)
    assert sol.predicted_coverage == pytest.approx(tau, abs=0.005)
    assert sol.beta0_star == pytest.approx(z, abs=0.01)
    # classical sqrt(gamma tau (1 - tau)) / phi(z) error rate of quantile regression
    classical = math.sqrt(0.001 * tau * (1 - tau)) / norm.pdf(z)
    assert sol.M_u_star == pytest.approx(classical, rel=0.05)


def test_ridge_shrinks_estimation_error(solved):
    _, sol = solved
    ridge = solve_asymptotic(AsymptoticProblem(gamma=0.2, tau=0.9, lambda_scaled=5.0))
    assert ridge.gradient_norm <= 1e-6
    assert ridge.M_u_star != pytest.approx(sol.M_u_star, abs=1e-3)


def test_dual_law(solved):
    problem, sol = solved
    law = limiting_dual_law(sol)
    draws = law.sample(1_000_000, np.random.default_rng(4))
    assert draws.min() >= -(1 - problem.tau) and draws.max() <= problem.tau
    assert np.mean(draws <= 0) == pytest.approx(law.prob_nonpositive, abs=1e-3)
    assert law.prob_nonpositive == pytest.approx(sol.predicted_coverage)
    assert np.mean(draws == -(1 - problem.tau)) == pytest.approx(law.mass_lower, abs=1e-3)
    assert np.mean(draws == problem.tau) == pytest.approx(law.mass_upper, abs=1e-3)
    q = law.quantile(0.9)
    assert np.mean(draws <= q) == pytest.approx(0.9, abs=1e-3)
    assert law.cdf(q) >= 0.9 - 1e-12


def test_degenerate_law_is_two_point():
    law = DualLaw(0.9, -1.0, 1.0, 0.0, True)
    assert law.mass_lower + law.mass_upper == pytest.approx(1.0)
    assert set(np.unique(law.sample(1000, np.random.default_rng(0)))) <= {-0.09999999999999998, 0.9}


def test_unconverged_solution_rejected():
    problem = AsymptoticProblem(gamma=0.2, tau=0.9)
    bad = AsymptoticSolution(1.0, 1.0, 1.0, 0.5, 0.5, 0.0, 0.8, False, gradient_norm=1.0, problem=problem)
    with pytest.raises(AsymptoticError):
        limiting_dual_law(bad)


def test_problem_validation():
    with pytest.raises(ValueError):
        AsymptoticProblem(gamma=0.7, tau=0.9)
    with pytest.raises(ValueError):
        AsymptoticProblem(gamma=0.2, tau=1.0)
