"""Variational and adjoint systems, Gateaux limits and the duality identity.

Both linear systems reuse the regression engine of :mod:`fbdsde.solver`
with coefficients frozen along a base solution. In the adjoint the roles are

    p  forward   drift -H_Y, diffusion -H_Z, d<-B integrand k, p(0) = -gamma_Y(Y(0)),
    q  backward  driver H_y, d<-B term H_z, dW integrand h,   q(T) = -h_y(y(T)) p(T) + Phi_y(y(T)).

Partials enter at the left end of each step, except those belonging to the
``d<-B`` term of the backward equation, which sit at the right end, as in the
state scheme. With this alignment ``E[H_v]`` at step ``i`` is

    q_i f_v - p_i F_v - k_{i+1} G_v(t_{i+1}) + h_i g_v + l_v.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .model import CoefficientSet, DecoupledCoefficientSet
from .paths import BrownianEnsemble, ProcessPath
from .solver import (FBSystem, PicardDivergenceError, QuadrupleSolution, SolverConfig, TripleSolution,
                     as_control, scenario_se, solve_coupled, solve_system)

__all__ = [
    "VariationalSolution", "AdjointSolution", "GateauxReport", "DualityReport", "solve_variational",
    "gateaux_check", "variational_inequality", "solve_adjoint", "solve_adjoint_decoupled",
    "duality_check", "hv_paths", "as_quadruple",
]

_STATE = ("y", "Y", "z", "Z")


class _Base:
    """Partials of ``cs`` along a base solution, at either end of step ``i``."""

    def __init__(self, cs: CoefficientSet, sol: QuadrupleSolution, u: np.ndarray):
        self.cs, self.u = cs, u
        self.t = sol.grid.times
        # time-major copies so that one time slice is contiguous
        self.arr = tuple(np.ascontiguousarray(x.T) for x in sol.arrays())

    def left(self, i):
        y, Y, z, Z = self.arr
        return (self.t[i], y[i], Y[i], z[i], Z[i], self.u[i])

    def right(self, i):
        y, Y, z, Z = self.arr
        return (self.t[i + 1], y[i + 1], Y[i + 1], z[i + 1], Z[i + 1], self.u[i])

    def d(self, name, var, args):
        return self.cs.d_raw(name, var, *args)

    def depends(self, names, vars_) -> bool:
        """Whether any partial ``name_var`` is nonzero somewhere along the base."""
        for i in range(len(self.u)):
            a = self.left(i)
            if any(np.any(np.asarray(self.d(n, v, a)) != 0.0) for n in names for v in vars_):
                return True
        return False

    def deterministic(self, names, vars_) -> bool:
        """Whether every partial ``name_var`` takes one value across paths at each step."""
        for i in range(len(self.u)):
            for a in (self.left(i), self.right(i)):
                for n in names:
                    for v in vars_:
                        x = np.asarray(self.d(n, v, a))
                        if x.ndim and np.ptp(x) != 0.0:
                            return False
        return True


def as_quadruple(sol: TripleSolution) -> QuadrupleSolution:
    """A decoupled solution viewed as ``(y, Y, z, Z) = (X, Y, 0, Z)``."""
    zero = ProcessPath(sol.grid, np.zeros_like(sol.X.values))
    return QuadrupleSolution(sol.X, sol.Y, zero, sol.Z, sol.grid, sol.control, 1, 0.0, (0.0,), sol.x, sol.ensemble)


def _ens(sol, ens):
    ens = ens if ens is not None else sol.ensemble
    if ens is None:
        raise ValueError("no ensemble given and the base solution carries none")
    return ens


# ---------------------------------------------------------------------------
# variational system

@dataclass(frozen=True, eq=False)
class VariationalSolution:
    y1: ProcessPath
    Y1: ProcessPath
    z1: ProcessPath
    Z1: ProcessPath
    direction: np.ndarray
    base: QuadrupleSolution = field(repr=False)
    picard_iterations: int = 0

    def arrays(self):
        return self.y1.values, self.Y1.values, self.z1.values, self.Z1.values


def _combine(pairs, like):
    # sum of coefficient * value, skipping exact-zero scalar coefficients
    out = np.zeros_like(like)
    for coef, val in pairs:
        if not (np.isscalar(coef) and coef == 0.0):
            out = out + coef * val
    return out


def _linearized(b: _Base, name: str, args, d, dv):
    """``name_y y1 + name_Y Y1 + name_z z1 + name_Z Z1 + name_v v`` at ``args``."""
    pairs = [(b.d(name, var, args), val) for var, val in zip(_STATE, d)]
    return _combine(pairs + [(b.d(name, "v", args), dv)], d[0])


def solve_variational(cs: CoefficientSet, base: QuadrupleSolution, v, ens: Optional[BrownianEnsemble] = None,
                      cfg: SolverConfig = SolverConfig()) -> VariationalSolution:
    """Linearization of the state system along ``base`` in direction ``v``.

    Coefficients are frozen at the base path; ``y1(0) = 0`` and
    ``Y1(T) = h_y(y(T)) y1(T)`` exactly.
    """
    ens = _ens(base, ens)
    u = base.control
    v = as_control(v, base.grid)
    b = _Base(cs, base, u)
    yT = base.y.values[:, -1]
    hy = cs.d("h", "y", yT)
    ybase = b.arr[0]

    sys = FBSystem(
        drift=lambda i, a, A, c, C: _linearized(b, "f", b.left(i), (a, A, c, C), v[i]),
        diffusion=lambda i, a, A, c, C: _linearized(b, "g", b.left(i), (a, A, c, C), v[i]),
        driver=lambda i, a, A, c, C: _linearized(b, "F", b.left(i), (a, A, c, C), v[i]),
        noise=lambda i, a, A, c, C: _linearized(b, "G", b.right(i), (a, A, c, C), v[i]),
        initial=np.zeros(ens.n_paths),
        terminal=lambda a: hy * a,
        extra=lambda i: [ybase[i]],
        forward_coupled=b.depends(("f", "g"), ("Y", "z", "Z")),
    )
    raw = solve_system(sys, ens, cfg)
    g = base.grid
    return VariationalSolution(ProcessPath(g, raw.a), ProcessPath(g, raw.A), ProcessPath(g, raw.c),
                               ProcessPath(g, raw.C), v, base, raw.iterations)


def variational_inequality(cs: CoefficientSet, base: QuadrupleSolution, var: VariationalSolution) -> Tuple[float, float]:
    """``E[Phi_y y1(T) + gamma_Y Y1(0) + int (sum l_beta beta1 + l_v v) dt]`` and its standard error."""
    paths = _cost_derivative_paths(cs, base, var)
    return float(paths.mean()), scenario_se(paths, _n_outer(base))


def _cost_derivative_paths(cs, base, var):
    b = _Base(cs, base, base.control)
    dt = base.grid.dt
    y1 = var.arrays()
    total = cs.d("Phi", "y", base.y.values[:, -1]) * y1[0][:, -1] + cs.d("gamma", "Y", base.Y.values[:, 0]) * y1[1][:, 0]
    for i in range(base.grid.n_steps):
        total = total + _linearized(b, "l", b.left(i), tuple(x[:, i] for x in y1), var.direction[i]) * dt
    if not np.all(np.isfinite(total)):
        raise FloatingPointError("non-finite terms in the variational inequality")
    return total


def _n_outer(sol) -> int:
    return sol.ensemble.n_outer if sol.ensemble is not None else 1


# ---------------------------------------------------------------------------
# Gateaux limits

@dataclass
class GateauxReport:
    rho_values: List[float]
    m2_errors: List[float]
    bound_values: List[float]
    bound_slope: float
    failed_rho: List[float] = field(default_factory=list)

    @property
    def bound_slopes(self) -> float:
        return self.bound_slope


def gateaux_check(cs: CoefficientSet, x0: float, u, v, rhos: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
                  ens: Optional[BrownianEnsemble] = None, cfg: SolverConfig = SolverConfig(),
                  base: Optional[QuadrupleSolution] = None) -> GateauxReport:
    """Difference quotients ``(zeta_rho - zeta)/rho`` against the variational solution.

    ``bound_values`` holds ``E int |zeta_rho - zeta|^2 dt`` and ``bound_slope``
    its least-squares log-log slope in ``rho``.
    """
    rhos = [float(r) for r in rhos]
    if any(r <= 0 for r in rhos) or any(a <= b for a, b in zip(rhos, rhos[1:])):
        raise ValueError("rho values must be positive and strictly decreasing")
    if ens is None:
        raise ValueError("an ensemble is required")
    u = as_control(u, ens.grid, cs.control_set)
    v = as_control(v, ens.grid)
    if base is None:
        base = solve_coupled(cs, x0, u, ens, cfg)
    var = solve_variational(cs, base, v, ens, cfg)
    dt = ens.grid.dt
    m2 = lambda d: float(np.mean(np.sum(d[:, :-1] ** 2, axis=1)) * dt)
    errors, bounds, failed, used = [], [], [], []
    for r in rhos:
        try:
            sol = solve_coupled(cs, x0, u + r * v, ens, cfg, init=base)
        except (PicardDivergenceError, FloatingPointError, ValueError):
            failed.append(r)
            continue
        diffs = [x - y for x, y in zip(sol.arrays(), base.arrays())]
        errors.append(math.sqrt(sum(m2(d / r - w) for d, w in zip(diffs, var.arrays()))))
        bounds.append(sum(m2(d) for d in diffs))
        used.append(r)
    slope = float("nan")
    if len(used) >= 2 and all(x > 0 for x in bounds):
        slope = float(np.polyfit(np.log(used), np.log(bounds), 1)[0])
    return GateauxReport(used, errors, bounds, slope, failed)


# ---------------------------------------------------------------------------
# adjoint system

@dataclass(frozen=True, eq=False)
class AdjointSolution:
    p: ProcessPath
    q: ProcessPath
    k: ProcessPath
    h: ProcessPath
    picard_iterations: int = 0
    picard_residual: float = 0.0

    def arrays(self):
        return self.p.values, self.q.values, self.k.values, self.h.values

    def m2_norm(self) -> float:
        return math.sqrt(sum(x.m2_norm() ** 2 for x in (self.p, self.q, self.k, self.h)))


def _H_partial(b: _Base, var: str, args, p, q, k, h):
    d = lambda n: b.d(n, var, args)
    return _combine([(d("f"), q), (d("F"), -p), (d("G"), -k), (d("g"), h), (d("l"), 1.0)], p)


def solve_adjoint(cs: CoefficientSet, base: QuadrupleSolution, ens: Optional[BrownianEnsemble] = None,
                  cfg: SolverConfig = SolverConfig(),
                  init: Optional[AdjointSolution] = None) -> AdjointSolution:
    """Solve the adjoint system along ``base`` (``p`` forward, ``q`` backward)."""
    ens = _ens(base, ens)
    b = _Base(cs, base, base.control)
    yT = base.y.values[:, -1]
    hy, phiy = cs.d("h", "y", yT), cs.d("Phi", "y", yT)
    ybase = b.arr[0]
    p0 = np.broadcast_to(-cs.d("gamma", "Y", base.Y.values[:, 0]), (base.Y.n_paths,))
    # p picks up B-dependence only through its initial value, through q and h, or through
    # path-dependent coefficients; without any of these k vanishes and p is W-adapted
    b_free = (np.ptp(p0) == 0.0 and not b.depends(("f", "g"), ("Y", "Z"))
              and b.deterministic(("F", "G", "l"), ("Y", "Z")))
    sys = FBSystem(
        drift=lambda i, p, q, k, h: -_H_partial(b, "Y", b.left(i), p, q, k, h),
        diffusion=lambda i, p, q, k, h: -_H_partial(b, "Z", b.left(i), p, q, k, h),
        driver=lambda i, p, q, k, h: _H_partial(b, "y", b.left(i), p, q, k, h),
        noise=lambda i, p, q, k, h: _H_partial(b, "z", b.right(i), p, q, k, h),
        initial=p0,
        terminal=lambda p: -hy * p + phiy,
        extra=lambda i: [ybase[i]],
        forward_coupled=not b_free,
    )
    warm = None if init is None else (init.q.values, init.k.values, init.h.values)
    raw = solve_system(sys, ens, cfg, warm)
    g = base.grid
    return AdjointSolution(ProcessPath(g, raw.a), ProcessPath(g, raw.A), ProcessPath(g, raw.c),
                           ProcessPath(g, raw.C), raw.iterations, raw.history[-1])


def solve_adjoint_decoupled(dc: DecoupledCoefficientSet, base: TripleSolution,
                            ens: Optional[BrownianEnsemble] = None,
                            cfg: SolverConfig = SolverConfig()) -> AdjointSolution:
    """Adjoint of the decoupled system.

    ``p`` solves a forward BDSDE (drift ``p f_Y + k g_Y - l_Y``, diffusion
    ``p f_Z + k g_Z - l_Z``) that does not involve ``q``; ``q`` then solves a
    standard backward equation with driver ``H_X`` and ``q(T) = -htilde_X p(T)``.
    The Picard loop therefore settles after its second pass.
    """
    return solve_adjoint(dc.as_coupled(), as_quadruple(base), ens, cfg)


# ---------------------------------------------------------------------------
# Hamiltonian derivative and duality

def hv_paths(cs: CoefficientSet, base: QuadrupleSolution, adj: AdjointSolution) -> np.ndarray:
    """Per-path ``H_v`` at every step, shape ``(n_paths, n_steps)``."""
    b = _Base(cs, base, base.control)
    p, q, k, h = adj.arrays()
    out = np.empty((p.shape[0], base.grid.n_steps))
    for i in range(base.grid.n_steps):
        L, R = b.left(i), b.right(i)
        out[:, i] = (q[:, i] * b.d("f", "v", L) - p[:, i] * b.d("F", "v", L) - k[:, i + 1] * b.d("G", "v", R)
                     + h[:, i] * b.d("g", "v", L) + b.d("l", "v", L))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Hamiltonian derivative")
    return out


@dataclass
class DualityReport:
    lhs: float
    rhs: float
    difference: float
    se: float
    z_score: float
    passed: bool


def duality_check(cs: CoefficientSet, base: QuadrupleSolution, var: VariationalSolution,
                  adj: AdjointSolution, n_se: float = 3.0) -> DualityReport:
    """Compare both sides of the duality identity pathwise-paired.

    Left: ``E[y1(T) q(T) + Y1(T) p(T) - Y1(0) p(0)]`` plus the linearized cost
    integral. Right: ``E int H_v v dt``. The standard error is that of the
    per-path difference, clustered by scenario.
    """
    y1, Y1 = var.y1.values, var.Y1.values
    p, q = adj.p.values, adj.q.values
    dt = base.grid.dt
    running = _cost_derivative_paths(cs, base, var)
    # drop the boundary cost terms already inside the running sum helper
    boundary_cost = (cs.d("Phi", "y", base.y.values[:, -1]) * y1[:, -1]
                     + cs.d("gamma", "Y", base.Y.values[:, 0]) * Y1[:, 0])
    lhs = y1[:, -1] * q[:, -1] + Y1[:, -1] * p[:, -1] - Y1[:, 0] * p[:, 0] + running - boundary_cost
    rhs = (hv_paths(cs, base, adj) * var.direction).sum(axis=1) * dt
    d = lhs - rhs
    se = scenario_se(d, _n_outer(base))
    diff = float(d.mean())
    z = abs(diff) / se if se > 0 else (0.0 if abs(diff) < 1e-12 else math.inf)
    return DualityReport(float(lhs.mean()), float(rhs.mean()), diff, se, z, bool(z <= n_se))
