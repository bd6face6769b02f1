"""Optimal control of forward-backward doubly stochastic differential equations.

Regression Monte Carlo solvers for the state, variational and adjoint
systems, maximum-principle diagnostics, a projected-gradient optimizer and
the probabilistic representation of the associated SPDE.
"""
from .paths import (TimeGrid, BrownianEnsemble, ProcessPath, ItoDecomposition, generate_ensemble,
                    generate_nested_ensemble, forward_ito_integral, backward_ito_integral, verify_ito_formula,
                    atomic_write)
from .model import (ControlSet, CoefficientSet, DecoupledCoefficientSet, SamplerConfig, check_lipschitz,
                    check_monotonicity, check_derivative_consistency, lq_model, nonlinear_model,
                    linear_model, reaction_diffusion_model, heat_model)
from .solver import (SolverConfig, QuadrupleSolution, TripleSolution, PicardDivergenceError, solve_coupled,
                     solve_decoupled, solve_bdsde, cost_functional)
from .variation import (VariationalSolution, AdjointSolution, solve_variational, solve_adjoint,
                        solve_adjoint_decoupled, duality_check, gateaux_check, hv_paths)
from .maximum_principle import (HamiltonianContext, hamiltonian, hv_residual, check_sufficiency, OptimizerConfig,
                                ControlProblem, optimize_control, OptimizationError)
from .spde import (SpaceGrid, RandomField, evaluate_field, Increment, lognormal_conditional,
                   conditional_monte_carlo, ExponentialFunctional, path_shift_derivative, ClosedFormModel,
                   malliavin_closed_form, BenchmarkConfig, lq_benchmark, reaction_diffusion_benchmark)
from .config import RunConfig, ConfigError, parse_config, serialize_config

__version__ = "0.1.0"
