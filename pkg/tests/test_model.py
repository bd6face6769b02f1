import numpy as np
import pytest
from hypothesis import given, strategies as st

from fbdsde.expressions import Expression, ExpressionError
from fbdsde.model import (CoefficientSet, ControlSet, DecoupledCoefficientSet, SamplerConfig,
                          check_derivative_consistency, check_lipschitz, check_monotonicity, heat_model, linear_model,
                          lq_model, nonlinear_model, reaction_diffusion_model)
from fbdsde.regression import (RankDeficientError, RegressionEstimator, estimate_conditional_expectation,
                               polynomial_basis)


# --- regression -------------------------------------------------------------

def test_polynomial_basis_columns():
    x, y = np.array([1.0, 2.0]), np.array([3.0, 5.0])
    b = polynomial_basis([x, y], 2)
    # 1, x, y, x^2, xy, y^2
    np.testing.assert_array_equal(b[1], [1, 2, 5, 4, 10, 25])


@given(c=st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_regression_reproduces_quadratics(c):
    x = np.random.default_rng(0).standard_normal(200)
    target = c[0] + c[1] * x + c[2] * x ** 2
    for ridge in (0.0, 1e-12):
        fit = estimate_conditional_expectation(target, x, RegressionEstimator(2, ridge))
        np.testing.assert_allclose(fit, target, atol=1e-6 * (1 + np.abs(target).max()))


def test_regression_conditional_mean_of_noise():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(20000)
    y = x ** 2 + rng.standard_normal(20000)
    fit = estimate_conditional_expectation(y, x, RegressionEstimator(2))
    assert np.sqrt(np.mean((fit - x ** 2) ** 2)) < 0.05


def test_regression_rank_deficiency():
    x = np.ones(50)
    with pytest.raises(RankDeficientError):
        estimate_conditional_expectation(x, [x], RegressionEstimator(2, ridge=0.0), step=4)
    # with a ridge constant features are dropped instead
    fit = estimate_conditional_expectation(2 * x, [x], RegressionEstimator(2, ridge=1e-10))
    np.testing.assert_allclose(fit, 2.0)
    with pytest.raises(ValueError):
        RegressionEstimator(degree=-1)


# --- expressions ------------------------------------------------------------

def test_expression_values_and_derivatives():
    e = Expression("a*exp(y) + v**2", ("y", "v"), {"a": 2.0})
    assert float(e(0.0, 3.0)) == pytest.approx(11.0)
    assert float(e.derivative("y")(0.0, 3.0)) == pytest.approx(2.0)
    assert e.depends_on("v") and not e.depends_on("Y")
    const = Expression("3", ("y",))
    np.testing.assert_array_equal(const(np.zeros(4)), np.full(4, 3.0))


@pytest.mark.parametrize("text", ["__import__('os')", "y.real", "lambda: 1", "foo(y)", "q + 1", "exp(y, y)",
                                  "y if y else 1", "True"])
def test_expression_rejects_unsafe_or_unknown(text):
    with pytest.raises(ExpressionError):
        Expression(text, ("y",))


def test_expression_rejects_shadowing():
    with pytest.raises(ExpressionError):
        Expression("y", ("y",), {"y": 1.0})
    with pytest.raises(ExpressionError):
        Expression("y", ("w",))


# --- coefficient sets -------------------------------------------------------

def test_control_set():
    u = ControlSet(-1.0, 1.0)
    np.testing.assert_array_equal(u.project(np.array([-3.0, 0.2, 5.0])), [-1.0, 0.2, 1.0])
    assert u.contains(np.array([0.0, 1.0])) and not u.contains(1.1)
    with pytest.raises(ValueError):
        ControlSet(1.0, -1.0)


def test_from_expressions_requires_every_function():
    with pytest.raises(ValueError):
        CoefficientSet.from_expressions({"f": "0"}, ControlSet(-1, 1))


@pytest.mark.parametrize("make", [lq_model, nonlinear_model, reaction_diffusion_model, heat_model])
def test_builtin_partials_match_finite_differences(make):
    rep = check_derivative_consistency(make(), SamplerConfig(n_samples=500))
    assert rep.passed, rep.failures


def test_derivative_check_catches_wrong_partial():
    cs = lq_model().with_function("l_v", lambda t, y, Y, z, Z, v: 2 * v)
    rep = check_derivative_consistency(cs, SamplerConfig(n_samples=200))
    assert "l_v" in rep.failures
    with pytest.raises(KeyError):
        lq_model().with_function("nope", abs)


def test_lq_assumptions():
    rep = check_monotonicity(lq_model(), SamplerConfig(n_samples=4000))
    # <A(zeta) - A(zeta'), zeta - zeta'> = -(dz^2 + dZ^2): zero along y and Y, so only weakly monotone
    assert abs(rep.sup_q) < 1e-9 and rep.inf_q == pytest.approx(-1.0)
    assert rep.direction_of_monotonicity == "neither" and rep.weakly_monotone == "H3"
    assert rep.lipschitz_estimate == pytest.approx(np.sqrt(2), rel=0.05)


@pytest.mark.parametrize("mu", [0.3, 1.0])
def test_monotonicity_direction_on_linear_models(mu):
    down = check_monotonicity(linear_model(-mu * np.eye(4)), SamplerConfig(n_samples=2000))
    assert down.direction_of_monotonicity == "H3" and down.monotonicity_estimate == pytest.approx(mu)
    up = check_monotonicity(linear_model(mu * np.eye(4), h="-y"), SamplerConfig(n_samples=2000))
    assert up.direction_of_monotonicity == "H'3" and up.h_monotone
    lip = check_lipschitz(linear_model(mu * np.eye(4)))
    assert lip.lipschitz_estimate == pytest.approx(mu)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_samples=0)
    with pytest.raises(ValueError):
        SamplerConfig(half_width=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(T=0.0)


def test_decoupled_as_coupled_maps_roles():
    dc = reaction_diffusion_model()
    cs = dc.as_coupled()
    t, x, Y, Z, v = 0.3, 1.2, 0.7, -0.4, 1.5
    assert float(cs("f", t, x, Y, 9.0, Z, v)) == 0.0          # b
    assert float(cs("g", t, x, Y, 9.0, Z, v)) == v            # sigma
    assert float(cs("F", t, x, Y, 9.0, Z, v)) == pytest.approx(Y + Z)
    assert float(cs("G", t, x, Y, 9.0, Z, v)) == pytest.approx(Y)
    assert float(cs("h", x)) == x and float(cs("gamma", Y)) == Y
    assert float(cs.d("F", "z", t, x, Y, 9.0, Z, v)) == 0.0


def test_reaction_diffusion_validation():
    with pytest.raises(ValueError):
        reaction_diffusion_model(gamma_exp=0.5)
    assert isinstance(heat_model("exp(x)"), DecoupledCoefficientSet)
