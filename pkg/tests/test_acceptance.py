"""Acceptance criteria.

Each test prints one ``[PASS]`` or ``[FAIL]`` line with the measured values
and then asserts.  Criterion 4 audits the certificates of every fit made by
criteria 1 to 3, so the module runs in file order.
"""

import csv
import math
import time

import numpy as np
import pytest

import qrcoverage.solver as solver_module
from oracles import grid_prox
from qrcoverage.asymptotics import AsymptoticProblem, limiting_dual_law, solve_asymptotic
from qrcoverage.baselines import IntervalMethod, IntervalReport, evaluate, interval_predict
from qrcoverage.calibrate import (
    OFF_TARGET,
    SATURATED_UPPER,
    bai_level,
    calibrate_additive,
    calibrate_additive_ridge,
    calibrate_level,
    calibrate_level_ridge,
    default_lambda_grid,
)
from qrcoverage.conformal import randomized_gcc_predict
from qrcoverage.core import Dataset, ProblemSpec, empirical_quantile, normalize, read_csv
from qrcoverage.experiments import SimConfig, generate, run_figure, trial_rng
from qrcoverage.loo import loo_coverage_bruteforce, loo_coverage_dual
from qrcoverage.solver import SolverConfig, fit, fit_augmented, pinball_envelope, pinball_prox

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

CFG = SolverConfig()

# certificates of every fit made by criteria 1-3, plus rows that failed
_AUDIT = {"certs": [], "failures": [], "active": False}


@pytest.fixture(scope="module", autouse=True)
def _record_certificates():
    original = solver_module._solve

    def recording(prob, config, warm):
        res = original(prob, config, warm)
        if _AUDIT["active"]:
            _AUDIT["certs"].append((prob.scale, res.kkt))
        return res

    solver_module._solve = recording
    yield
    solver_module._solve = original


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}", flush=True)
        assert ok, detail

    return emit


def _audit_rows(rep):
    _AUDIT["failures"].extend(r for r in rep.rows if r.get("error"))


def test_criterion_01_bias_reproduction(report):
    _AUDIT["active"] = True
    start = time.perf_counter()
    rep = run_figure("fig1", dict(n=300, trials=100, n_test=2000, tau=0.9))
    elapsed = time.perf_counter() - start
    _AUDIT["active"] = False
    _audit_rows(rep)
    mis = {a["d"]: a["miscoverage"]["mean"] for a in rep.aggregates if a["method"] == "QR"}
    ok = abs(mis[1] - 0.10) <= 0.015 and mis[90] >= 0.18 and elapsed <= 600
    detail = ", ".join(f"d={d}: {m:.4f}" for d, m in sorted(mis.items()))
    report(1, ok, f"mean QR miscoverage {detail}; runtime {elapsed:.0f}s")


def test_criterion_02_correction_validity(report):
    _AUDIT["active"] = True
    rep = run_figure("fig6", dict(n=200, dims=(20, 40, 80), trials=100, tau=0.9,
                                  lambda_top=0.1, lambda_step=0.005, c_range=(-10.0, 10.0)))
    _AUDIT["active"] = False
    _audit_rows(rep)
    mis = {(a["method"], a["d"]): a["miscoverage"]["mean"] for a in rep.aggregates}
    corrected = [(m, d) for m in ("LevelRidge", "AdditiveRidge", "FixedThresh") for d in (20, 40, 80)]
    inside = {k: abs(mis[k] - 0.10) <= 0.02 for k in corrected}
    qr_fails = abs(mis[("QR", 80)] - 0.10) > 0.02
    ok = all(inside.values()) and qr_fails
    detail = "; ".join(f"{m} d={d}: {mis[(m, d)]:.4f}" for m, d in corrected + [("QR", 80)])
    report(2, ok, f"mean miscoverage {detail}; failed rows {sum(1 for r in rep.rows if r.get('error'))}")


def test_criterion_03_dual_loo_equivalence(report):
    _AUDIT["active"] = True
    mismatches, ties, runs = 0, 0, 0
    for seed in range(50):
        rng = np.random.default_rng([3, seed])
        X = rng.standard_normal((30, 5))
        y = X @ (rng.standard_normal(5) / math.sqrt(5)) + rng.standard_normal(30)
        ds = Dataset(X, y)
        for frac in (0.01, 0.05):
            spec = ProblemSpec(0.9, frac * ds.n)
            res = fit(ds, spec, CFG)
            dual = loo_coverage_dual(res)
            brute = loo_coverage_bruteforce(ds, spec, CFG, full_fit=res)
            mismatches += dual.covered_count != brute.covered_count
            ties += dual.tie_count + brute.tie_count
            runs += 1
    _AUDIT["active"] = False
    report(3, mismatches == 0, f"{runs} instances, {mismatches} covered-count mismatches, {ties} ties reported")


def test_criterion_04_kkt_certification(report):
    certs = _AUDIT["certs"]
    bad = 0
    worst = dict(box=0.0, stat=0.0, slack=0.0, gap=0.0)
    for scale, c in certs:
        worst["box"] = max(worst["box"], c.dual_residual)
        worst["stat"] = max(worst["stat"], c.stationarity_norm / scale)
        worst["slack"] = max(worst["slack"], c.slackness_violation)
        worst["gap"] = max(worst["gap"], c.duality_gap_per_sample)
        bad += not (c.dual_residual <= 1e-9 and c.stationarity_norm <= 1e-6 * scale
                    and c.slackness_violation <= 1e-6 and c.duality_gap_per_sample <= 1e-6)
    failed = len(_AUDIT["failures"])
    ok = len(certs) > 0 and bad == 0 and failed == 0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(4, ok, f"{len(certs)} fits audited, {bad} uncertified, {failed} failed fits; worst {detail}")


def test_criterion_05_dual_path_monotone(report):
    worst = 0.0
    for inst in range(20):
        rng = np.random.default_rng([5, inst])
        n, d = 40 + inst, 3 + inst % 5
        X = rng.standard_normal((n, d))
        ds = Dataset(X, X @ (rng.standard_normal(d) / math.sqrt(d)) + rng.standard_normal(n))
        spec = ProblemSpec(0.9, 0.0 if inst % 2 == 0 else 0.05 * n)
        base = fit(ds, spec, CFG)
        x = rng.standard_normal(d)
        center = float(base.predict(x)[0])
        probes = np.sort(center + 3 * ds.response_scale() * rng.standard_normal(100))
        warm, etas = base, []
        for y in probes:
            warm = fit_augmented(ds, spec, CFG, x, y, warm_start=warm)
            etas.append(warm.duals[-1])
        worst = max(worst, float(np.max(-np.diff(etas))))
    report(5, worst <= 1e-8, f"20 instances x 100 probes, largest decrease {max(worst, 0.0):.2e}")


def test_criterion_06_randomized_exactness(report):
    reps, tau = 2000, 0.9
    sim = SimConfig(n=100, d=20, n_test=1, tau=tau, seed=6)
    spec = ProblemSpec(tau)
    covered = 0
    for rep in range(reps):
        train, test, _ = generate(sim, rep)
        u = float(trial_rng(sim.seed, rep, 99).uniform(-(1 - tau), tau))
        cutoff = randomized_gcc_predict(train, spec, CFG, test.X[0], u)
        covered += float(test.y[0]) <= cutoff
    cov = covered / reps
    se = math.sqrt(tau * (1 - tau) / reps)
    report(6, abs(cov - tau) <= 2 * se, f"coverage {cov:.4f} over {reps} repetitions, band +/-{2 * se:.4f}")


def test_criterion_07_theory_vs_monte_carlo(report):
    tau, gamma, n = 0.9, 0.2, 2000
    d = int(gamma * n)
    sol = solve_asymptotic(AsymptoticProblem(gamma=gamma, tau=tau, sigma_eps=1.0))
    q_theory = float(limiting_dual_law(sol).quantile(tau))
    sim = SimConfig(n=n, d=d, n_test=1, tau=tau, seed=7)
    qs, b0s, errs = [], [], []
    for trial in range(20):
        train, _, beta = generate(sim, trial)
        res = fit(train, ProblemSpec(tau), CFG)
        qs.append(empirical_quantile(tau, res.duals))
        b0s.append(res.intercept)
        errs.append(float(np.linalg.norm(res.beta - beta)))
    dq = abs(np.mean(qs) - q_theory)
    db = abs(np.mean(b0s) - sol.beta0_star)
    du = abs(np.mean(errs) - sol.M_u_star)
    ok = dq <= 0.02 and db <= 0.05 and du <= 0.05
    report(7, ok, f"dual quantile {np.mean(qs):.4f} vs {q_theory:.4f} (worst trial {max(abs(np.array(qs) - q_theory)):.4f}); "
                  f"intercept {np.mean(b0s):.4f} vs {sol.beta0_star:.4f}; error {np.mean(errs):.4f} vs {sol.M_u_star:.4f}")


def test_criterion_08_bai_cross_check(report):
    tau, n, d = 0.9, 400, 20
    sim = SimConfig(n=n, d=d, n_test=1, tau=tau, seed=8)
    levels = [calibrate_level(generate(sim, t)[0], tau, 0.0, CFG).tau_adj for t in range(50)]
    target = bai_level(tau, d, n)
    diff = abs(np.mean(levels) - target)
    half = (tau - d / (2 * n)) / (1 - d / (2 * n))
    report(8, diff <= 0.02, f"mean adjusted level {np.mean(levels):.4f} vs closed form {target:.4f} "
                            f"(n={n}, d={d}; half-ratio denominator would give {half:.4f})")


def test_criterion_09_envelope_golden(report):
    rng = np.random.default_rng(9)
    worst_env = worst_prox = worst_id = 0.0
    for _ in range(1000):
        x, rho, tau = rng.uniform(-5, 5), rng.uniform(0.01, 3), rng.uniform(0.01, 0.99)
        arg, val = grid_prox(x, rho, tau, points=10_000)
        worst_env = max(worst_env, abs(pinball_envelope(x, rho, tau) - val))
        worst_prox = max(worst_prox, abs(pinball_prox(x, rho, tau) - arg))
        y = x / rho
        conj = (y - np.clip(y, -(1 - tau), tau)) ** 2 * rho / 2
        worst_id = max(worst_id, abs(pinball_envelope(x, rho, tau) + conj - x * x / (2 * rho)))
    ok = worst_env <= 1e-6 and worst_prox <= 1e-6 and worst_id <= 1e-10
    report(9, ok, f"envelope {worst_env:.1e}, prox {worst_prox:.1e}, duality identity {worst_id:.1e}")


def test_criterion_10_saturation(report):
    tau, n = 0.9, 200
    level_ok, add_ok, notes = True, True, []
    for seed in range(3):
        train = generate(SimConfig(n=n, d=100, n_test=1, seed=seed), 0)[0]
        lv = calibrate_level(train, tau, 0.0, CFG)
        level_ok &= SATURATED_UPPER in lv.flags and OFF_TARGET in lv.flags and lv.loo_coverage < tau
        level_ok &= lv.tau_adj >= 1 - 1 / (n + 1) - 1e-6
        train = generate(SimConfig(n=n, d=60, n_test=1, seed=seed), 0)[0]
        ad = calibrate_additive(train, tau, 0.0, (-10.0, 10.0), CFG)
        add_ok &= SATURATED_UPPER in ad.flags and OFF_TARGET in ad.flags and ad.loo_coverage < tau
        notes.append(f"level {lv.tau_adj:.4f}/{lv.loo_coverage:.3f}, offset {ad.c:.3f}/{ad.loo_coverage:.3f}")
    report(10, level_ok and add_ok, "; ".join(notes))


def _write_csv(path, X, y):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(X.shape[1])] + ["target"])
        w.writerows(np.column_stack([X, y]).tolist())


def _csv_cases(tmp_path):
    rng = np.random.default_rng(11)
    n, d = 200, 12
    X = rng.standard_normal((n, d))
    yield "gaussian", X, X @ rng.standard_normal(d) / 3 + rng.standard_normal(n)
    X = rng.exponential(size=(n, d)) + rng.integers(0, 2, size=(n, d))
    yield "skewed-heteroscedastic", X, X[:, 0] + (1 + X[:, 1]) * rng.standard_t(3, size=n)
    X = np.column_stack([rng.uniform(size=(150, 15)), np.ones(150)])
    yield "bounded-with-constant", X, np.sin(3 * X[:, 0]) + rng.laplace(size=150)


def test_criterion_11_csv_property(report, tmp_path):
    alpha = 0.1
    problems = []
    for name, X, y in _csv_cases(tmp_path):
        path = tmp_path / f"{name}.csv"
        _write_csv(path, X, y)
        data = normalize(read_csv(str(path), "target"))
        n_train = int(0.7 * data.n)
        train, test = data.subset(np.arange(n_train)), data.subset(np.arange(n_train, data.n))
        grid = default_lambda_grid(train.n, 0.1, 0.01)
        for level in (alpha / 2, 1 - alpha / 2):
            for calib in (calibrate_level_ridge, calibrate_additive_ridge):
                res = calib(train, level, grid, config=CFG)
                if not res.on_target:
                    problems.append(f"{name} {res.method.value} level {level}: gap {res.coverage_gap:.4f}")
        for method in IntervalMethod:
            iv = interval_predict(method, train, alpha, CFG, test.X[:20], lambda_grid=grid)
            rep = evaluate(iv, test.y[:20], test.X[:20], alpha)
            valid = (isinstance(rep, IntervalReport) and 0 <= rep.coverage <= 1 and rep.median_length >= 0
                     and np.all(rep.widths >= 0) and math.isfinite(rep.multiaccuracy))
            if not valid:
                problems.append(f"{name} {method.value}: invalid report")
    report(11, not problems, "all corrected methods on target and all reports valid" if not problems
           else "; ".join(problems))
