"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed again in the
pytest terminal summary. Monte Carlo tests run at fixed seeds.
"""
import math
import time

import numpy as np
import pytest

from fbdsde import (ControlSet, CoefficientSet, HamiltonianContext, ItoDecomposition, ProcessPath, SolverConfig,
                    TimeGrid, check_sufficiency, duality_check, evaluate_field, gateaux_check,
                    generate_ensemble, generate_nested_ensemble, heat_model, hv_residual, lq_model,
                    nonlinear_model, optimize_control, solve_adjoint, solve_adjoint_decoupled, solve_coupled,
                    solve_decoupled, solve_variational, verify_ito_formula)
from fbdsde.cli import main
from fbdsde.maximum_principle import ControlProblem, OptimizerConfig
from fbdsde.model import DecoupledCoefficientSet, reaction_diffusion_model
from fbdsde.paths import coarsen
from fbdsde.solver import cost_paths, scenario_se
from fbdsde.spde import (BenchmarkConfig, ClosedFormModel, Increment, conditional_monte_carlo,
                         lognormal_conditional, malliavin_closed_form, path_shift_derivative,
                         reaction_diffusion_benchmark)
from fbdsde.variation import as_quadruple, hv_paths

GRID = TimeGrid(0.0, 1.0, 50)


@pytest.fixture(scope="module")
def lq_ens():
    return generate_nested_ensemble(GRID, 8, 2000, 11)


@pytest.fixture(scope="module")
def lq_zero(lq_ens):
    cs = lq_model()
    state = solve_coupled(cs, 0.0, 0.0, lq_ens)
    return cs, state, solve_adjoint(cs, state, lq_ens)


def test_1_lq_optimizer(lq_ens, record_criterion):
    start = time.perf_counter()
    res = optimize_control(ControlProblem(lq_model(), 0.0, lq_ens), 0.5)
    wall = time.perf_counter() - start
    tr = res.trace
    norm = math.sqrt(float(np.sum(res.control ** 2)) * GRID.dt)
    ok = norm <= 5e-2 and tr.J[-1] <= tr.J[0] and tr.monotone and wall <= 120
    record_criterion(1, ok, f"||u_final||_M2 = {norm:.3g} (<= 5e-2), J {tr.J[0]:.4g} -> {tr.J[-1]:.3g}, "
                            f"monotone={tr.monotone}, {tr.iteration[-1]} iterations, {wall:.1f} s (<= 120 s)")
    assert ok


def test_2_lq_adjoint_at_zero(lq_zero, record_criterion):
    _, _, adj = lq_zero
    n = adj.m2_norm()
    record_criterion(2, n <= 1e-6, f"M2 norm of (p, q, k, h) at the zero quadruple = {n:.3g} (<= 1e-6)")
    assert n <= 1e-6


def test_3_mp_residual(lq_zero, lq_ens, record_criterion):
    cs, state, adj = lq_zero
    at_opt = hv_residual(HamiltonianContext(cs, state, adj), tol=1e-3)
    s5 = solve_coupled(cs, 0.0, 0.5, lq_ens)
    at_half = hv_residual(HamiltonianContext(cs, s5, solve_adjoint(cs, s5, lq_ens)), tol=1e-3)
    ok = at_opt.min_residual >= -1e-3 and at_half.violation and at_half.min_residual < -1e-3
    record_criterion(3, ok, f"min residual at u = 0: {at_opt.min_residual:.3g} (>= -1e-3); "
                            f"at u = 0.5: {at_half.min_residual:.3g} (violation detected: {at_half.violation})")
    assert ok


# criteria 4 and 5 share the solves on a 64 x 250 ensemble
MODELS = {"lq": (lq_model, 0.0, 0.5), "nonlinear": (nonlinear_model, 0.5, 0.3)}


@pytest.fixture(scope="module")
def gradient_setup():
    ens = generate_nested_ensemble(GRID, 64, 250, 7)
    out = {}
    for name, (make, x0, u) in MODELS.items():
        cs = make()
        state = solve_coupled(cs, x0, u, ens)
        out[name] = (cs, x0, np.full(GRID.n_steps, u), state, solve_adjoint(cs, state, ens))
    return ens, out


def test_4_duality(gradient_setup, record_criterion):
    ens, models = gradient_setup
    direction = np.cos(np.arange(GRID.n_steps) / 10.0)
    parts, ok = [], True
    for name, (cs, _, _, state, adj) in models.items():
        var = solve_variational(cs, state, direction, ens)
        d = duality_check(cs, state, var, adj)
        ok &= d.passed
        parts.append(f"{name}: lhs-rhs = {d.difference:.3g} ({d.z_score:.2f} SE)")
    record_criterion(4, ok, "; ".join(parts) + " (<= 3 SE)")
    assert ok


def test_5_gradient_vs_finite_differences(gradient_setup, record_criterion):
    ens, models = gradient_setup
    idx = np.sort(np.random.default_rng(0).choice(GRID.n_steps, 10, replace=False))
    eps, parts, ok = 0.05, [], True
    for name, (cs, x0, u, state, adj) in models.items():
        hv = hv_paths(cs, state, adj) * GRID.dt
        worst = 0.0
        for i in idx:
            e = np.zeros(GRID.n_steps)
            e[i] = eps
            up = solve_coupled(cs, x0, u + e, ens, init=state)
            dn = solve_coupled(cs, x0, u - e, ens, init=state)
            fd = (cost_paths(cs, up) - cost_paths(cs, dn)) / (2 * eps)
            diff = fd - hv[:, i]
            rel = abs(diff.mean()) / abs(fd.mean())
            z = abs(diff.mean()) / scenario_se(diff, ens.n_outer)
            ok &= rel <= 0.05 or z <= 3.0
            worst = max(worst, min(rel / 0.05, z / 3.0))
        parts.append(f"{name}: worst coordinate at {worst:.2f} of its bound")
    record_criterion(5, ok, "; ".join(parts) + " (5% relative or 3 SE, 10 coordinates)")
    assert ok


def test_6_gateaux_slope(lq_ens, record_criterion):
    rep = gateaux_check(lq_model(), 0.0, 0.5, np.sin(np.arange(GRID.n_steps) / 8.0), ens=lq_ens)
    ok = abs(rep.bound_slope - 2.0) <= 0.3
    record_criterion(6, ok, f"log-log slope of E int |zeta_rho - zeta|^2 = {rep.bound_slope:.3f} (2 +- 0.3)")
    assert ok


def test_7_ito_formula(record_criterion):
    fine = generate_ensemble(TimeGrid(0.0, 1.0, 400), 20000, 3)
    ms = []
    for factor in (8, 4, 2, 1):
        ens = coarsen(fine, factor) if factor > 1 else fine
        g, P = ens.grid, ens.n_paths
        dec = ItoDecomposition(0.0, ProcessPath.constant(g, P, 0.0), ProcessPath.constant(g, P, 0.0),
                               ProcessPath.constant(g, P, 1.0))
        ms.append(verify_ito_formula(dec, ens).mean_square_residual)
    ratios = [b / a for a, b in zip(ms, ms[1:])]
    halves = all(abs(r - 0.5) <= 0.15 for r in ratios)
    big = generate_ensemble(GRID, 100_000, 4)
    P = big.n_paths
    dec = ItoDecomposition(0.0, ProcessPath.constant(GRID, P, 0.0), ProcessPath.constant(GRID, P, 0.0),
                           ProcessPath.constant(GRID, P, 1.0))
    rep = verify_ito_formula(dec, big)
    z_T = abs(rep.expectation_gap[-1]) / rep.expectation_se[-1]
    ok = halves and z_T <= 3.0
    record_criterion(7, ok, f"mean-square residual ratios per halving {np.round(ratios, 3).tolist()} (0.5 +- 30%); "
                            f"expectation gap at T {z_T:.2f} SE at 1e5 paths (<= 3)")
    assert ok


def _linear_bdsde_error(seed=0, n_outer=4, n_inner=8000):
    # Y = exp(s X_T) + int (a Y + b Z) dr + int c d<-B - int Z dW with X = W
    a, b, c, s = 0.5, 0.5, 0.2, 0.25
    dc = DecoupledCoefficientSet.from_expressions(
        {"b": "0", "sigma": "1", "f": f"{a}*Y + {b}*Z", "g": f"{c}", "htilde": f"exp({s}*x)", "l": "0",
         "gamma": "0"}, ControlSet(-1.0, 1.0))
    ens = generate_nested_ensemble(GRID, n_outer, n_inner, seed)
    sol = solve_decoupled(dc, 0.0, 0.0, ens)
    dt, tau = GRID.dt, GRID.T - GRID.times
    noise = np.zeros_like(ens.W)
    for i in range(GRID.n_steps - 1, -1, -1):
        noise[:, i] = noise[:, i + 1] * math.exp(a * dt) + c * ens.dB[:, i] * math.exp(a * dt / 2)
    exact = np.exp(s * ens.W + (s * s / 2 + b * s + a) * tau) + noise
    worst = 0.0
    for i in (0, 12, 25, 37):
        m = sol.Y.values[:, i].reshape(n_outer, -1).mean(axis=1)
        ref = exact[:, i].reshape(n_outer, -1).mean(axis=1)
        worst = max(worst, float(np.max(np.abs(m - ref) / np.abs(ref))))
    return worst


def _heat_error(seed=0):
    times = [0.0, 0.26, 0.5, 0.76]
    xs = np.array([-1.5, -0.5, 0.0, 0.5, 1.0, 2.0])
    ens = generate_nested_ensemble(GRID, 1, 10_000, seed)
    fld = evaluate_field(heat_model(), 0.0, times, xs, ens)
    ref = xs[None, None, :] ** 2 + (GRID.T - np.array(times))[None, :, None]
    return float(np.max(np.abs(fld.u - ref) / ref))


def test_8_bdsde_oracles(record_criterion):
    lin, heat = _linear_bdsde_error(), _heat_error()
    ok = lin <= 0.02 and heat <= 0.03
    record_criterion(8, ok, f"linear BDSDE max relative error {lin:.4f} (<= 0.02); "
                            f"heat field u = x^2 + (T - t) max relative error {heat:.4f} (<= 0.03)")
    assert ok


def test_9_closed_forms(record_criterion):
    ens = generate_nested_ensemble(GRID, 8, 2000, 0)
    s = 0.5
    z = []
    for filtration, terms in (("F", [Increment("W", 0.0, 1.0), Increment("B", s, 1.0)]),
                              ("W", [Increment("W", 0.2, 0.8, 1.5)]),
                              ("B", [Increment("B", 0.0, 1.0, -0.5), Increment("W", 0.0, 0.4)])):
        closed = np.broadcast_to(lognormal_conditional(terms, s, ens, filtration), (ens.n_paths,))
        for path in (0, 2500):
            mc, se = conditional_monte_carlo(terms, s, ens, path, 100_000, seed=path + 1, filtration=filtration)
            z.append(abs(closed[path] - mc) / se)
    model = ClosedFormModel()
    qf = model.q_functional()
    closed = malliavin_closed_form(s, model, ens)
    shifted = path_shift_derivative(lambda e: qf.conditional(s, e, "W"), ens, s)
    mal = float(np.max(np.abs(shifted - closed) / np.abs(closed)))
    rep = reaction_diffusion_benchmark(BenchmarkConfig(seed=0))
    stated = [rep.stage(n) for n in ("state_stated_formula", "adjoint_stated_formula")]
    reported = (all(st.passed is None and st.value is not None and "Trusted side" in st.note for st in stated)
                and "raises mean E[H]" in rep.stage("candidate_rule").note)
    graded = rep.stage("lognormal_conditional").passed and rep.stage("malliavin").passed
    ok = max(z) <= 3.0 and mal <= 0.01 and reported and graded
    record_criterion(9, ok, f"lognormal closed form vs MC worst {max(z):.2f} SE (<= 3); Malliavin vs path shift "
                            f"{mal:.2g} relative (<= 1%); stated state formula gap "
                            f"{rep.stage('state_stated_formula').value:.3g}, stated candidate rule: "
                            f"{rep.stage('candidate_rule').note}")
    assert ok


def test_10_sufficiency(lq_zero, record_criterion):
    cs, state, adj = lq_zero
    lq_rep = check_sufficiency(HamiltonianContext(cs, state, adj))

    ens = generate_nested_ensemble(GRID, 8, 2000, 2)
    dc = reaction_diffusion_model(gamma_exp=2.0, v_max=2.0)
    sol = solve_decoupled(dc, 1.0, 0.0, ens)
    ex_rep = check_sufficiency(HamiltonianContext(dc.as_coupled(), as_quadruple(sol),
                                                  solve_adjoint_decoupled(dc, sol, ens)))

    concave = CoefficientSet.from_expressions(
        {**cs.expressions, "l": "0.5*(y**2 + Y**2 + z**2 + Z**2 + v**2) - v**4"}, cs.control_set)
    s0 = solve_coupled(concave, 0.0, 0.0, ens)
    bad = check_sufficiency(HamiltonianContext(concave, s0, solve_adjoint(concave, s0, ens)))
    ok = lq_rep.passed and ex_rep.passed and not bad.passed and bad.convexity_worst_violation > 0
    record_criterion(10, ok, f"LQ passes={lq_rep.passed}; reaction-diffusion (gamma = 2, U = [0, 2]) "
                             f"passes={ex_rep.passed}; concave counterexample passes={bad.passed} "
                             f"(worst midpoint convexity violation {bad.convexity_worst_violation:.3g})")
    assert ok


def test_11_determinism_across_threads(tmp_path, record_criterion):
    cfg = tmp_path / "lq.toml"
    cfg.write_text('[model]\nname = "lq"\n\n[ensemble]\nseed = 11\nn_outer = 8\nn_inner = 2000\n')
    outs = {}
    for threads in (1, 4, 8):
        out = tmp_path / f"t{threads}"
        code = main(["benchmark", "lq", "--config", str(cfg), "--out", str(out), "--threads", str(threads)])
        assert code == 0
        outs[threads] = {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}
    names = sorted(outs[1])
    same = len(names) >= 4 and all(outs[t] == outs[1] for t in (4, 8))
    record_criterion(11, same, f"`benchmark lq` CSVs {names} byte-identical at 1, 4 and 8 threads: {same}")
    assert same
