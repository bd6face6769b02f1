import numpy as np
import pytest

from fbdsde import (SolverConfig, TimeGrid, duality_check, gateaux_check, generate_nested_ensemble, lq_model,
                    nonlinear_model, solve_adjoint, solve_adjoint_decoupled, solve_coupled, solve_decoupled,
                    solve_variational)
from fbdsde.spde import ClosedFormModel
from fbdsde.variation import as_quadruple, hv_paths, variational_inequality

GRID = TimeGrid(0.0, 1.0, 20)


@pytest.fixture(scope="module")
def ens():
    return generate_nested_ensemble(GRID, 8, 500, seed=31)


@pytest.fixture(scope="module")
def lq_half(ens):
    cs = lq_model()
    s = solve_coupled(cs, 0.0, 0.5, ens)
    return cs, s, solve_adjoint(cs, s, ens)


def test_lq_adjoint_vanishes_at_zero(ens):
    cs = lq_model()
    s = solve_coupled(cs, 0.0, 0.0, ens)
    a = solve_adjoint(cs, s, ens)
    assert a.m2_norm() == 0.0
    assert np.all(hv_paths(cs, s, a) == 0.0)


def test_lq_adjoint_terminal_and_initial_conditions(lq_half):
    cs, s, a = lq_half
    # p(0) = -gamma_Y(Y(0)) = -Y(0); q(T) = -h_y p(T) + Phi_y = y(T)
    np.testing.assert_allclose(a.p.values[:, 0], -s.Y.values[:, 0])
    np.testing.assert_allclose(a.q.values[:, -1], s.y.values[:, -1])


def test_lq_gradient_is_about_four_u(lq_half):
    # H_v = q + h - k + v for LQ; at the constant control 0.5 its mean is close to 4 * 0.5
    cs, s, a = lq_half
    hv = hv_paths(cs, s, a).mean(axis=0)
    assert np.all(np.isfinite(hv))
    assert abs(hv.mean() - 2.0) < 0.2


def test_duality_identity_lq_and_nonlinear(ens, lq_half):
    cs, s, a = lq_half
    v = np.sin(np.arange(GRID.n_steps) / 4.0)
    d = duality_check(cs, s, solve_variational(cs, s, v, ens), a)
    assert d.passed, d
    nl = nonlinear_model()
    sn = solve_coupled(nl, 0.5, 0.3, ens)
    dn = duality_check(nl, sn, solve_variational(nl, sn, v, ens), solve_adjoint(nl, sn, ens))
    assert dn.passed, dn


def test_variational_solution_is_linear_in_direction(ens, lq_half):
    cs, s, _ = lq_half
    v = np.cos(np.arange(GRID.n_steps) / 3.0)
    one = solve_variational(cs, s, v, ens)
    two = solve_variational(cs, s, 2 * v, ens)
    # exact up to the Picard stopping tolerance
    for x, y in zip(one.arrays(), two.arrays()):
        np.testing.assert_allclose(2 * x, y, atol=1e-4)
    assert np.all(one.y1.values[:, 0] == 0)
    val, se = variational_inequality(cs, s, one)
    assert np.isfinite(val) and se >= 0


def test_gateaux_bound_is_quadratic_in_rho(ens):
    rep = gateaux_check(lq_model(), 0.0, 0.3, np.ones(GRID.n_steps) * 0.5, ens=ens)
    assert rep.failed_rho == []
    assert abs(rep.bound_slope - 2.0) <= 0.3
    with pytest.raises(ValueError):
        gateaux_check(lq_model(), 0.0, 0.3, 0.5, rhos=(0.1, 0.2), ens=ens)
    with pytest.raises(ValueError):
        gateaux_check(lq_model(), 0.0, 0.3, 0.5)


def test_reaction_diffusion_adjoint_matches_discrete_solution():
    # p and k are known in closed form on the grid; the solver must reproduce them to round-off
    g = TimeGrid(0.0, 1.0, 25)
    ens = generate_nested_ensemble(g, 4, 400, seed=8)
    model = ClosedFormModel()
    dc = model.coefficients()
    sol = solve_decoupled(dc, 1.0, 0.5, ens)
    adj = solve_adjoint_decoupled(dc, sol, ens)
    p, q, k, h = model.exact_adjoint(ens, discrete=True)
    np.testing.assert_allclose(adj.p.values, p, atol=1e-10)
    assert adj.k.m2_norm() <= 1e-12
    # q and h come from regressions: their means are accurate, individual paths are noisy
    assert abs(adj.q.values[:, 0].mean() / q[:, 0].mean() - 1) < 0.05
    np.testing.assert_allclose(adj.p.values[:, 0], -1.0)


def test_adjoint_decoupled_equals_coupled_form(ens):
    dc = ClosedFormModel().coefficients()
    sol = solve_decoupled(dc, 1.0, 0.5, ens)
    a = solve_adjoint_decoupled(dc, sol, ens)
    b = solve_adjoint(dc.as_coupled(), as_quadruple(sol), ens, SolverConfig())
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
