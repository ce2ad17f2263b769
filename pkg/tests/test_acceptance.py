"""Acceptance suite: one test per criterion, each recording a verdict line.

The lines are printed by the test (visible with ``-s``) and collected into an
``acceptance criteria`` section of the terminal summary.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from h1delay.convex_projection import WAlphaSet, project_vbeta, project_walpha, verify_projection_properties
from h1delay.delay_functionals import (
    convex_pair_sampler,
    echo_delay,
    empirical_lipschitz,
    state_value_delay,
    threshold_crossing,
    threshold_delay,
    vbeta_member,
    walpha_member,
)
from h1delay.grid_function import make, weighted_h1_norm
from h1delay.picard_solver import (
    PicardOperator,
    SddeProblem,
    SolveOptions,
    choose_rho,
    continuous_dependence_study,
    key_estimate_study,
    picard_solve_projected,
    solve_sdde,
)
from h1delay.scenarios import run_classical, run_counterexample, run_positioning
from h1delay.weighted_calculus import verify_operator_bounds
from kkt_oracle import brute_force

# y' = -(1 + p^2/(2 + p^2)), p = psi(-s) = -s, from 1 down to 0: event time
# located by scipy's DOP853 integrator at rtol 1e-13.
THRESHOLD_EVENT_ORACLE = 0.9011709729169147


@pytest.fixture(scope="module")
def operator_reports():
    start = time.perf_counter()
    reports = verify_operator_bounds(trials=1000, seed=42)
    return reports, time.perf_counter() - start


@pytest.fixture(scope="module")
def classical():
    return run_classical()


@pytest.fixture(scope="module")
def counterexample():
    return run_counterexample()


@pytest.fixture(scope="module")
def positioning():
    return run_positioning()


def counterexample_problem(T=1.0, dt=0.01, value=1.0):
    phi = make(-2.0, 0.0, dt, np.full(int(round(2.0 / dt)) + 1, value))
    return SddeProblem(1, 2.0, T, lambda t, x, u: -u, 1.0, state_value_delay(2.0, 2.0), phi, "counterexample")


def check(result, name):
    return next(c for c in result.checks if c.name == name)


def test_criterion_01_operator_bounds(operator_reports, criterion):
    reports, elapsed = operator_reports
    core = [r for r in reports if r.name in ("prehistory_map", "integration_operator")]
    rhos = sorted({r.rho for r in core})
    worst = max(r.normalized for r in core)
    ok = len(core) == 8 and rhos == [0.5, 1.0, 2.0, 8.0] and all(r.passed for r in core) and elapsed < 30.0
    criterion(1, "operator bounds for Theta and I_rho", ok, f"worst ratio/bound {worst:.9f}, {elapsed:.1f} s")
    assert ok


def test_criterion_02_sobolev_constant(operator_reports, criterion):
    reports, _ = operator_reports
    sob = [r for r in reports if r.name == "sobolev_embedding"]
    ok = len(sob) == 1 and sob[0].passed and sob[0].rtol <= 1e-10
    criterion(2, "Sobolev embedding constant", ok, f"max normalized ratio {sob[0].max_observed_ratio:.6f}")
    assert ok


def test_criterion_03_key_estimate(criterion):
    problem = counterexample_problem(dt=0.05)
    outs = [key_estimate_study(problem, beta, pairs=1000, seed=42) for beta in (0.5, 1.0, 4.0)]
    ok = all(o["max_ratio"] <= o["bound"] * (1 + 1e-3) for o in outs)
    detail = ", ".join(f"beta={o['beta']:g}: {o['max_ratio']:.4f} <= {o['bound']:.4f}" for o in outs)
    criterion(3, "key Lipschitz estimate on V_beta", ok, detail)
    assert ok


def test_criterion_04_projection(criterion):
    props = verify_projection_properties(trials=1000, seed=42)
    props_ok = all(p.passed for p in props) and len(props) == 6
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        N = int(rng.integers(2, 9))
        dt = 1.0 / (N - 1)
        phi = make(-1.0, 0.0, dt, rng.uniform(-1.0, 1.0, N))
        beta = float(rng.uniform(0.2, 2.0))
        oracle = brute_force(phi.values[:, 0], dt, slope=beta)
        got = project_vbeta(phi, beta).projected
        worst = max(worst, weighted_h1_norm(got.with_values(oracle) - got))
    wset = WAlphaSet(1.0, alpha=0.1, w=0.6, w_plus=0.8, c=1.5)
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        N = int(rng.integers(2, 6))
        dt = 1.0 / (N - 1)
        phi = make(-1.0, 0.0, dt, rng.uniform(-1.5, 1.5, N))
        oracle = brute_force(phi.values[:, 0], dt, wset.lower, wset.upper, wset.slope_bound)
        got = project_walpha(phi, wset).projected
        worst = max(worst, weighted_h1_norm(got.with_values(oracle) - got))
    ok = props_ok and worst <= 1e-8
    summary = ", ".join(f"{p.name}={p.observed:.3g}" for p in props)
    criterion(4, "projection properties and KKT oracle", ok, f"{summary}; oracle gap {worst:.2e}")
    assert ok


def test_criterion_05_contraction(classical, criterion):
    rep = solve_sdde(counterexample_problem(), SolveOptions(dt=0.01, target_q=0.5))
    ratios_ce = rep.contraction_ratios[1:]
    ratios_cd = classical.reports["constant_delay"].contraction_ratios[1:]
    worst = max(ratios_ce + ratios_cd, default=0.0)
    ok = rep.complete and bool(ratios_ce) and worst <= 0.55
    criterion(5, "Picard contraction ratios", ok, f"max ratio {worst:.4f} over {len(ratios_ce) + len(ratios_cd)} ratios")
    assert ok


def test_criterion_06_constant_delay_accuracy(classical, criterion):
    err = check(classical, "delay_sup_error")
    factor = check(classical, "delay_refinement_factor")
    ok = err.passed and factor.passed
    criterion(6, "constant-delay accuracy vs method of steps", ok, f"sup error {err.value:.3e}, refinement factor {factor.value:.3f}")
    assert ok


def test_criterion_07_classical_ode(classical, criterion):
    err = check(classical, "ode_error")
    ok = err.passed and err.bound == 5e-6
    criterion(7, "x' = x reproduces e at t = 1", ok, f"|x(1) - e| = {err.value:.3e}")
    assert ok


def test_criterion_08_counterexample(counterexample, criterion):
    names = ["x1_residual", "x2_residual", "lip_growth_exponent_0", "lip_growth_exponent_1"]
    checks = [check(counterexample, n) for n in names]
    ok = all(c.passed for c in checks)
    criterion(8, "counterexample identities", ok, ", ".join(f"{c.name}={c.value:.3g}" for c in checks))
    assert ok


def test_criterion_09_apriori_bound(classical, counterexample, positioning, criterion):
    checks = [c for res in (classical, counterexample, positioning) for c in res.checks if c.name.startswith("apriori")]
    ok = len(checks) >= 8 and all(c.passed for c in checks)
    criterion(9, "a-priori growth bound on every complete solve", ok, f"{len(checks)} solves, min margin {min(c.value for c in checks):.3g}")
    assert ok


def test_criterion_10_uniqueness_and_dependence(criterion):
    tol = 1e-10
    problem = counterexample_problem()
    rep = solve_sdde(problem, SolveOptions(dt=0.01, tol=tol))
    beta = rep.beta_trace[-1][0]
    L, A = problem.contraction_constants(beta)
    rho = choose_rho(L, problem.h, beta, 0.0, A=A)
    a, _, _ = picard_solve_projected(problem, beta, rho, tol, op=PicardOperator(problem, beta, 0.01))
    y0 = np.random.default_rng(42).standard_normal(a.values.shape)
    b, _, _ = picard_solve_projected(problem, beta, rho, tol, y0=y0, op=PicardOperator(problem, beta, 0.01))
    start_gap = float(np.max(np.abs(a.values - b.values)))
    limit = math.exp(2.0 * problem.L_g * problem.T) * 1.1
    ratios = []
    s = problem.phi.times[:, None]
    phi = problem.phi.with_values(1.0 + 0.3 * np.sin(2.0 * s))
    for delta in (1e-2, 1e-3, 1e-4):
        psi = phi.with_values(phi.values + delta * np.cos(3.0 * s))
        ratios.append(continuous_dependence_study(problem, phi, psi, SolveOptions(dt=0.01, tol=tol))["ratio"])
    ok = start_gap <= 10 * tol and all(r <= limit for r in ratios)
    criterion(10, "uniqueness and continuous dependence", ok, f"start gap {start_gap:.2e}, ratios {[round(r, 4) for r in ratios]} <= {limit:.3f}")
    assert ok


def test_criterion_11_echo_delay(criterion):
    r = echo_delay(1.0, 1.0, 4.0, 0.1)
    zero = make(-r.h, 0.0, 0.01, np.zeros(int(round(r.h / 0.01)) + 1))
    zero_err = abs(-r(zero) - 2.0 * 1.0 / 4.0)
    out = empirical_lipschitz(r, convex_pair_sampler(lambda rng: walpha_member(rng, r.validity_set, 0.02)), pairs=1000, seed=42)
    ok = zero_err <= 1e-12 and out["max_ratio"] <= r.lip_hint * (1 + 1e-6)
    criterion(11, "echo delay value and Lipschitz bound", ok, f"|s - 2w/c| = {zero_err:.1e}, ratio {out['max_ratio']:.4f} <= {r.lip_hint:.4f}")
    assert ok


def test_criterion_12_threshold_delay(criterion):
    h, dt = 1.0, 0.01
    t = -h + dt * np.arange(101)
    cos_window = make(-h, 0.0, dt, np.cos(t))
    const_err = max(
        abs(threshold_delay(lambda y, p, k=k: np.full(np.shape(y), k), 1.0, 4.0, 0.0, 1.0, h)(cos_window) + 1.0 / k)
        for k in (1.0, 1.5, 2.5, 4.0)
    )
    g = lambda y, p: 1.0 + p * p / (2.0 + p * p)  # noqa: E731
    lin = make(-h, 0.0, dt, t)
    s = threshold_crossing(lin.values[None], dt, g, 1.0, 1.5, 0.0, 1.0)[0]
    ref = threshold_crossing(lin.values[None], dt, g, 1.0, 1.5, 0.0, 1.0, ds=dt / 64, tol=1e-13)[0]
    var_err = max(abs(s - ref), abs(s - THRESHOLD_EVENT_ORACLE))
    rng = np.random.default_rng(42)
    W = np.stack([vbeta_member(rng, h, 0.05, 3.0, amplitude=2.0).values for _ in range(100)])
    slow = threshold_crossing(W, 0.05, g, 1.0, 3.0, 0.0, 1.0)
    fast = threshold_crossing(W, 0.05, lambda y, p: g(y, p) + 0.5 / (1.0 + y * y), 1.0, 3.0, 0.0, 1.0)
    mono = bool(np.all(fast <= slow))
    ok = const_err <= 1e-10 and var_err <= 1e-8 and mono
    criterion(12, "threshold delay accuracy and monotonicity", ok, f"const {const_err:.1e}, variable {var_err:.1e}, monotone on 100 windows: {mono}")
    assert ok
