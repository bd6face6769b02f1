"""Hamiltonians, first-order optimality residuals, sufficiency checks and a projected-gradient optimizer.

The Hamiltonian of the coupled problem is

    H(t, y, Y, z, Z, v, p, q, k, h) = q f - p F - k G + h g + l,

and for the decoupled problem ``Hbar = q b - p f - k g + h sigma + l``, which
is ``H`` of the coupled rewrite with the ``z`` slot fixed to zero. Along a
discrete solution the ``G`` term is taken at the right end of each step, so
``E[H_v]`` at step ``i`` is the gradient of the discrete cost in ``u_i``
divided by ``dt``.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .model import CoefficientSet, DecoupledCoefficientSet, SamplerConfig
from .paths import BrownianEnsemble
from .solver import (PicardDivergenceError, QuadrupleSolution, SolverConfig, as_control, atomic_write,
                     cost_functional, cost_paths, scenario_se, solve_coupled)
from .variation import AdjointSolution, hv_paths, solve_adjoint

__all__ = [
    "HamiltonianContext", "MPResidualReport", "SufficiencyReport", "OptimizerConfig", "OptimizerTrace",
    "ControlProblem", "hamiltonian", "hamiltonian_pointwise", "decoupled_hamiltonian", "hv_residual",
    "endpoint_residual", "check_sufficiency", "optimize_control", "OptimizationError",
]


@dataclass(frozen=True, eq=False)
class HamiltonianContext:
    """Coefficients plus a solved state and adjoint on one ensemble."""

    cs: CoefficientSet
    state: QuadrupleSolution
    adjoint: AdjointSolution

    def __post_init__(self):
        shape = self.state.y.values.shape
        if any(x.shape != shape for x in self.adjoint.arrays()):
            raise ValueError("state and adjoint must share grid and path layout")

    @property
    def n_outer(self) -> int:
        return self.state.ensemble.n_outer if self.state.ensemble is not None else 1


def hamiltonian_pointwise(cs: CoefficientSet, t, y, Y, z, Z, v, p, q, k, h):
    """``q f - p F - k G + h g + l`` with every term at the same point."""
    a = (t, y, Y, z, Z, v)
    H = q * cs("f", *a) - p * cs("F", *a) - k * cs("G", *a) + h * cs("g", *a) + cs("l", *a)
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite Hamiltonian values")
    return H


def decoupled_hamiltonian(dc: DecoupledCoefficientSet, t, X, Y, Z, v, p, q, k, h):
    """``q b - p f - k g + h sigma + l`` for the decoupled system."""
    H = (q * dc("b", X, v) - p * dc("f", t, X, Y, Z, v) - k * dc("g", t, X, Y, Z, v)
         + h * dc("sigma", X, v) + dc("l", t, X, Y, Z, v))
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite Hamiltonian values")
    return H


def hamiltonian(ctx: HamiltonianContext, v=None) -> np.ndarray:
    """Step-aligned ``H`` along the solution, shape ``(n_paths, n_steps)``.

    ``v`` replaces the control (scalar or one value per step); by default the
    control of the solution is used. The ``G`` term sits at the right end of
    each step with ``k_{i+1}``.
    """
    st, ad, cs = ctx.state, ctx.adjoint, ctx.cs
    v = st.control if v is None else as_control(v, st.grid)
    t = st.grid.times
    y, Y, z, Z = st.arrays()
    p, q, k, h = ad.arrays()
    L = (t[:-1], y[:, :-1], Y[:, :-1], z[:, :-1], Z[:, :-1], v)
    R = (t[1:], y[:, 1:], Y[:, 1:], z[:, 1:], Z[:, 1:], v)
    H = (q[:, :-1] * cs("f", *L) - p[:, :-1] * cs("F", *L) - k[:, 1:] * cs("G", *R)
         + h[:, :-1] * cs("g", *L) + cs("l", *L))
    if not np.all(np.isfinite(H)):
        raise FloatingPointError("non-finite Hamiltonian values")
    return H


# ---------------------------------------------------------------------------
# necessary condition

@dataclass
class MPResidualReport:
    """``min over v in U of E[H_v] (v - u)`` per step.

    ``mean_residual`` uses ``E[H_v]``; ``worst_residual`` takes the same
    minimum path by path and then the worst path.
    """

    mean_hv: np.ndarray
    hv_se: np.ndarray
    mean_residual: np.ndarray
    worst_residual: np.ndarray
    tolerance: float
    grid_residual: Optional[np.ndarray] = None

    @property
    def violation(self) -> bool:
        return bool(np.any(self.mean_residual < -self.tolerance))

    @property
    def min_residual(self) -> float:
        return float(self.mean_residual.min())


def endpoint_residual(hv, u, lo: float, hi: float):
    """``min(hv (lo - u), hv (hi - u))`` elementwise: the exact minimum over an interval."""
    return np.minimum(hv * (lo - u), hv * (hi - u))


def hv_residual(ctx: HamiltonianContext, u=None, n_probe: int = 0, tol: float = 1e-3) -> MPResidualReport:
    """Necessary-condition residual at the control ``u`` (default: the solution's control).

    With ``n_probe > 1`` the minimum is also evaluated on ``n_probe``
    equispaced points of ``U`` as a cross-check of the endpoint formula.
    """
    u = ctx.state.control if u is None else as_control(u, ctx.state.grid, ctx.cs.control_set)
    cset = ctx.cs.control_set
    hv = hv_paths(ctx.cs, ctx.state, ctx.adjoint)
    mean = hv.mean(axis=0)
    se = np.array([scenario_se(hv[:, i], ctx.n_outer) for i in range(hv.shape[1])])
    res = endpoint_residual(mean, u, cset.lo, cset.hi)
    worst = endpoint_residual(hv, u, cset.lo, cset.hi).min(axis=0)
    grid_res = None
    if n_probe > 1:
        vs = np.linspace(cset.lo, cset.hi, n_probe)
        grid_res = (mean[None, :] * (vs[:, None] - u[None, :])).min(axis=0)
    return MPResidualReport(mean, se, res, worst, tol, grid_res)


# ---------------------------------------------------------------------------
# sufficient condition

@dataclass
class SufficiencyReport:
    convexity_in_state_and_control: bool
    convexity_worst_violation: float
    gamma_convex: bool
    phi_convex: bool
    gamma_worst_violation: float
    phi_worst_violation: float
    minimization_gap: float
    minimization_gap_se: float
    minimization_holds: bool
    minimization_argmin: np.ndarray
    integrability_estimates: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-9
    provenance: str = "sampled, not proven"

    @property
    def passed(self) -> bool:
        finite = all(math.isfinite(x) for x in self.integrability_estimates.values())
        return (self.convexity_in_state_and_control and self.gamma_convex and self.phi_convex
                and self.minimization_holds and finite)


def _midpoint_violation(fn: Callable, a, b) -> np.ndarray:
    return fn((a + b) / 2) - (fn(a) + fn(b)) / 2


def check_sufficiency(ctx: HamiltonianContext, sampler: SamplerConfig = SamplerConfig(n_samples=20000),
                      n_grid: int = 41, tol: float = 1e-9, comparison=None,
                      solver_cfg: Optional[SolverConfig] = None) -> SufficiencyReport:
    """Sample the convexity and minimization conditions of the sufficient principle.

    (a) midpoint convexity of ``H`` in ``(y, Y, z, Z, v)`` with ``(p, q, k, h)``
    frozen at values drawn from the adjoint paths; (b) midpoint convexity of
    ``gamma`` and ``Phi``; (c) the gap ``E[H(u)] - min_v E[H(v)]`` over a
    ``v``-grid per step, passing when it is within ``tol + 3 SE``; (d) the
    second moments appearing in the integrability conditions, against the
    state under a comparison control (midpoint of ``U`` unless given).
    """
    cs, st, ad = ctx.cs, ctx.state, ctx.adjoint
    rng = np.random.default_rng(sampler.seed)
    n, w = sampler.n_samples, sampler.half_width
    lo, hi = cs.control_set.lo, cs.control_set.hi
    P, N = st.y.values.shape[0], st.grid.n_steps

    # (a)
    pi, si = rng.integers(0, P, n), rng.integers(0, N, n)
    p, q, k, h = (x[pi, si] for x in ad.arrays())
    t = st.grid.times[si]
    pa = -w + 2 * w * rng.random((n, 4))
    pb = -w + 2 * w * rng.random((n, 4))
    va = lo + (hi - lo) * rng.random(n)
    vb = lo + (hi - lo) * rng.random(n)
    Hf = lambda x, v: hamiltonian_pointwise(cs, t, *x.T, v, p, q, k, h)
    viol = Hf((pa + pb) / 2, (va + vb) / 2) - (Hf(pa, va) + Hf(pb, vb)) / 2
    worst = float(viol.max())

    # (b)
    ya, yb = -w + 2 * w * rng.random(n), -w + 2 * w * rng.random(n)
    g_worst = float(_midpoint_violation(lambda x: cs("gamma", x), ya, yb).max())
    f_worst = float(_midpoint_violation(lambda x: cs("Phi", x), ya, yb).max())

    # (c)
    vs = np.unique(np.concatenate([np.linspace(lo, hi, n_grid), st.control]))
    H_u = hamiltonian(ctx)
    best_gap, best_se, argmin = 0.0, 0.0, np.array(st.control, dtype=float)
    holds = True
    means = np.empty((len(vs), N))
    for j, v in enumerate(vs):
        means[j] = hamiltonian(ctx, np.full(N, v)).mean(axis=0)
    jmin = means.argmin(axis=0)
    argmin = vs[jmin]
    for i in range(N):
        d = H_u[:, i] - hamiltonian(ctx, _replace(st.control, i, argmin[i]))[:, i]
        gap, se = float(d.mean()), scenario_se(d, ctx.n_outer)
        if gap > best_gap:
            best_gap, best_se = gap, se
        if gap > tol + 3 * se:
            holds = False

    # (d)
    moments = _integrability(ctx, comparison, solver_cfg)
    return SufficiencyReport(worst <= tol, worst, g_worst <= tol, f_worst <= tol, g_worst, f_worst,
                             best_gap, best_se, holds, argmin, moments, tol)


def _replace(u, i, val):
    out = np.array(u, dtype=float)
    out[i] = val
    return out


def _integrability(ctx: HamiltonianContext, comparison, solver_cfg) -> Dict[str, float]:
    cs, st, ad = ctx.cs, ctx.state, ctx.adjoint
    if st.ensemble is None:
        return {}
    lo, hi = cs.control_set.lo, cs.control_set.hi
    if comparison is None:
        mid = 0.5 * (lo + hi)
        comparison = hi if np.allclose(st.control, mid) else mid
    v = as_control(comparison, st.grid, cs.control_set)
    other = solve_coupled(cs, st.x0, v, st.ensemble, solver_cfg or SolverConfig(), init=st)
    dt = st.grid.dt
    t = st.grid.times[:-1]
    y, Y, z, Z = (x[:, :-1] for x in st.arrays())
    y2, Y2, z2, Z2 = (x[:, :-1] for x in other.arrays())
    p, q, k, hh = (x[:, :-1] for x in ad.arrays())
    ut = st.control
    m = lambda x: float(np.mean(np.sum(x ** 2, axis=1)) * dt)
    Hz = q * cs.d("f", "z", t, y, Y, z, Z, ut) - p * cs.d("F", "z", t, y, Y, z, Z, ut) \
        - k * cs.d("G", "z", t, y, Y, z, Z, ut) + hh * cs.d("g", "z", t, y, Y, z, Z, ut) + cs.d("l", "z", t, y, Y, z, Z, ut)
    HZ = q * cs.d("f", "Z", t, y, Y, z, Z, ut) - p * cs.d("F", "Z", t, y, Y, z, Z, ut) \
        - k * cs.d("G", "Z", t, y, Y, z, Z, ut) + hh * cs.d("g", "Z", t, y, Y, z, Z, ut) + cs.d("l", "Z", t, y, Y, z, Z, ut)
    G = lambda a, b, c, d, uu: cs("G", t, a, b, c, d, uu)
    g = lambda a, b, c, d, uu: cs("g", t, a, b, c, d, uu)
    return {
        "k_dY": m(k * (Y2 - Y)), "p_dZ": m(p * (Z2 - Z)), "h_dy": m(hh * (y2 - y)), "q_dz": m(q * (z2 - z)),
        "dY_HZ": m((Y2 - Y) * HZ), "p_dG": m(p * (G(y2, Y2, z2, Z2, v) - G(y, Y, z, Z, ut))),
        "dy_Hz": m((y2 - y) * Hz), "q_dg": m(q * (g(y2, Y2, z2, Z2, v) - g(y, Y, z, Z, ut))),
    }


# ---------------------------------------------------------------------------
# optimizer

class OptimizationError(RuntimeError):
    """A solve failed inside the optimizer; ``trace`` holds the iterations done so far."""

    def __init__(self, msg: str, trace: "OptimizerTrace"):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class OptimizerConfig:
    """Projected gradient ``u <- clip_U(u - step_size * E[H_v])`` with halving backtracking."""

    step_size: float = 0.2
    max_iter: int = 30
    grad_tol: float = 1e-2
    max_halvings: int = 8
    mp_tol: float = 1e-3

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_iter < 0 or self.max_halvings < 0:
            raise ValueError("iteration caps must be nonnegative")
        if not self.grad_tol >= 0:
            raise ValueError("grad_tol must be nonnegative")


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Coefficients, initial state, noise and solver settings of one control problem."""

    cs: CoefficientSet
    x0: float
    ensemble: BrownianEnsemble
    solver: SolverConfig = SolverConfig()


@dataclass
class OptimizerTrace:
    iteration: List[int] = field(default_factory=list)
    J: List[float] = field(default_factory=list)
    se: List[float] = field(default_factory=list)
    grad_norm: List[float] = field(default_factory=list)
    mp_residual: List[float] = field(default_factory=list)
    step_size: List[float] = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0

    def record(self, it, J, se, g, mp, step):
        for name, val in zip(("iteration", "J", "se", "grad_norm", "mp_residual", "step_size"),
                             (it, J, se, g, mp, step)):
            getattr(self, name).append(val)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "J", "standard_error", "gradient_norm", "worst_mp_residual", "step_size"])
        for row in zip(self.iteration, self.J, self.se, self.grad_norm, self.mp_residual, self.step_size):
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        atomic_write(path, self.to_csv_text())

    @property
    def monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.J, self.J[1:]))


@dataclass
class OptimizerResult:
    control: np.ndarray
    trace: OptimizerTrace
    state: QuadrupleSolution
    adjoint: AdjointSolution


def _proj_grad_norm(u, g, cset, dt):
    d = u - cset.project(u - g)
    return math.sqrt(float(np.sum(d ** 2)) * dt)


def optimize_control(problem: ControlProblem, u0, ocfg: OptimizerConfig = OptimizerConfig()) -> OptimizerResult:
    """Minimize the cost over piecewise-constant deterministic controls.

    Every iteration solves state and adjoint at the current control (warm
    started), takes the step ``clip_U(u - alpha E[H_v])`` and halves
    ``alpha`` until the cost, evaluated on the same noise, does not increase.
    Converges when the projected-gradient norm is at most ``grad_tol`` and
    the necessary-condition residual shows no violation at ``mp_tol``; also
    stops when no halving gives descent, or at ``max_iter``.
    """
    cs, ens, scfg = problem.cs, problem.ensemble, problem.solver
    cset, dt = cs.control_set, ens.grid.dt
    u = as_control(u0, ens.grid, cs.control_set)
    trace = OptimizerTrace()
    start = time.perf_counter()
    try:
        state = solve_coupled(cs, problem.x0, u, ens, scfg)
        adj = solve_adjoint(cs, state, ens, scfg)
    except (PicardDivergenceError, FloatingPointError) as exc:
        raise OptimizationError(f"initial solve failed: {exc}", trace) from exc
    J, se = cost_functional(cs, state)
    alpha = ocfg.step_size
    for it in range(ocfg.max_iter + 1):
        ctx = HamiltonianContext(cs, state, adj)
        mp = hv_residual(ctx, tol=ocfg.mp_tol)
        g = mp.mean_hv
        gnorm = _proj_grad_norm(u, g, cset, dt)
        trace.record(it, J, se, gnorm, mp.min_residual, alpha)
        if gnorm <= ocfg.grad_tol and not mp.violation:
            trace.converged = True
            break
        if it == ocfg.max_iter:
            break
        accepted = False
        a = alpha
        for _ in range(ocfg.max_halvings + 1):
            cand = cset.project(u - a * g)
            try:
                new_state = solve_coupled(cs, problem.x0, cand, ens, scfg, init=state)
            except (PicardDivergenceError, FloatingPointError) as exc:
                trace.wall_time = time.perf_counter() - start
                raise OptimizationError(f"state solve failed at iteration {it + 1}: {exc}", trace) from exc
            J_new, se_new = cost_functional(cs, new_state)
            if J_new <= J:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            break
        try:
            adj = solve_adjoint(cs, new_state, ens, scfg, init=adj)
        except (PicardDivergenceError, FloatingPointError) as exc:
            trace.wall_time = time.perf_counter() - start
            raise OptimizationError(f"adjoint solve failed at iteration {it + 1}: {exc}", trace) from exc
        u, state, J, se, alpha = cand, new_state, J_new, se_new, a
    trace.wall_time = time.perf_counter() - start
    return OptimizerResult(u, trace, state, adj)
