"""Regression Monte Carlo solvers for BDSDEs and forward-backward doubly stochastic systems.

Every solve in the package goes through one engine that handles a system

    a_{i+1} = a_i + drift_i dt + diffusion_i dW_i - c_{i+1} dB_i,      a_0 given,
    A_i     = E_i[A_{i+1} + driver_i dt + noise_{i+1} dB_i],           A_N = terminal(a_N),
    C_i     = E_i[A_{i+1} dW_i] / dt.

``E_i`` is a polynomial regression on the conditioning state inside one
B-scenario of a nested ensemble. The backward-martingale integrand ``c`` of
the forward equation is found by one pooled regression across all paths: the
Euler predictor is regressed on features known at ``t_{i+1}`` plus
``dB_i * (1, W_{i+1})``, and the fitted ``dB_i`` loading becomes
``c_{i+1}``. Coupling between the two halves is resolved by damped Picard
iteration.

Storage: ``c`` is estimated at step ``i`` and stored at index ``i + 1``;
``c_0`` repeats ``c_1``. ``C`` is stored at index ``i`` and ``C_N = C_{N-1}``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .model import CoefficientSet, ControlSet, DecoupledCoefficientSet
from .paths import BrownianEnsemble, ProcessPath, TimeGrid, atomic_write
from .regression import RankDeficientError, fit_predict, polynomial_basis

__all__ = [
    "SolverConfig", "QuadrupleSolution", "TripleSolution", "PicardDivergenceError", "FBSystem",
    "solve_system", "solve_coupled", "solve_decoupled", "solve_bdsde", "cost_functional",
    "decoupled_cost", "as_control", "discrete_defect", "scenario_se", "atomic_write",
]


class PicardDivergenceError(RuntimeError):
    """Picard iteration hit its cap; ``history`` holds the residual of every iteration."""

    def __init__(self, history: Sequence[float], tol: float):
        self.history = list(history)
        self.tol = tol
        last = self.history[-1] if self.history else float("nan")
        super().__init__(f"Picard iteration did not reach {tol:g} after {len(self.history)} "
                         f"iterations (last residual {last:.3e})")


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings shared by all solves.

    ``n_outer_scenarios`` and ``n_inner_paths`` size the ensembles built by
    :meth:`make_ensemble`; the solvers themselves use whatever ensemble they
    are handed.
    """

    n_picard_max: int = 60
    picard_tol: float = 1e-6
    n_inner_paths: int = 2000
    n_outer_scenarios: int = 8
    degree: int = 2
    damping: float = 0.5
    ridge: float = 1e-10
    threads: int = 1
    feature_updates: int = 3

    def __post_init__(self):
        for name in ("n_picard_max", "n_inner_paths", "n_outer_scenarios", "threads"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.feature_updates < 1:
            raise ValueError("feature_updates must be positive")

    def make_ensemble(self, grid: TimeGrid, seed: int) -> BrownianEnsemble:
        from .paths import generate_nested_ensemble
        return generate_nested_ensemble(grid, self.n_outer_scenarios, self.n_inner_paths, seed,
                                        threads=self.threads)


def as_control(control, grid: TimeGrid, control_set: Optional[ControlSet] = None, tol: float = 1e-12) -> np.ndarray:
    """Piecewise-constant control as an array of ``n_steps`` values (scalars are broadcast)."""
    u = np.asarray(control, dtype=float)
    if u.ndim == 0:
        u = np.full(grid.n_steps, float(u))
    if u.shape != (grid.n_steps,):
        raise ValueError(f"control must have {grid.n_steps} values, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("control values must be finite")
    if control_set is not None and not control_set.contains(u, tol):
        raise ValueError(f"control leaves U = [{control_set.lo}, {control_set.hi}]")
    return u


# ---------------------------------------------------------------------------
# engine

@dataclass
class FBSystem:
    """One forward-backward system for the engine.

    ``drift``, ``diffusion`` and ``driver`` are called as ``fn(i, a, A, c, C)``
    with left-endpoint arrays (for ``driver`` the ``A`` slot holds the
    regression prediction of ``A_{i+1}``). ``noise`` is called as
    ``fn(i, a, A, c, C)`` with the arrays at ``i + 1``; the control of step
    ``i`` applies. ``extra(i)`` lists additional conditioning features known at
    ``t_i`` (for instance a frozen base trajectory).
    """

    drift: Callable
    diffusion: Callable
    driver: Callable
    noise: Callable
    initial: np.ndarray
    terminal: Callable
    extra: Callable = lambda i: []
    forward_coupled: bool = True


@dataclass
class _Raw:
    a: np.ndarray
    A: np.ndarray
    c: np.ndarray
    C: np.ndarray
    iterations: int = 0
    history: List[float] = field(default_factory=list)


def _standardized(features):
    # centre and scale; drop constant features and exact (anti)copies of earlier ones
    out = []
    for f in features:
        sd = f.std()
        if sd > 1e-12 * max(1.0, float(np.abs(f).max())):
            s = (f - f.mean()) / sd
            if all(abs(float(np.mean(s * o))) < 1 - 1e-10 for o in out):
                out.append(s)
    return out


def _solve_gram(G, rhs, ridge, n, step):
    G = G.copy()
    d = np.einsum("...ii->...i", G)
    d += ridge * n
    d[d == 0] = 1.0  # all-zero columns (feature constant in that scenario) get a zero coefficient
    if ridge == 0:
        ev = np.linalg.eigvalsh(G)
        if np.any(ev[..., 0] <= 1e-13 * ev[..., -1]):
            raise RankDeficientError("regression design matrix is rank deficient", step)
    return np.linalg.solve(G, rhs)


class _Projector:
    """Ridge projection onto a polynomial basis, one independent block per scenario.

    ``features`` are ``(S, n)`` arrays; each is standardized within its
    scenario. A feature constant in a scenario becomes a zero column there.
    """

    def __init__(self, features, degree: int, ridge: float, step: Optional[int] = None):
        cols = []
        for f in features:
            sd = f.std(axis=1, keepdims=True)
            const = sd <= 1e-12 * np.maximum(1.0, np.abs(f).max(axis=1, keepdims=True))
            if np.all(const):
                continue
            z = np.where(const, 0.0, (f - f.mean(axis=1, keepdims=True)) / np.where(const, 1.0, sd))
            live = ~const[:, 0]
            if any(np.all(np.abs(np.mean(z * o, axis=1))[live] > 1 - 1e-10) for o in cols):
                continue
            cols.append(z)
        S, n = features[0].shape
        self.D = polynomial_basis(cols, degree) if cols else np.ones((S, n, 1))
        self.G = np.matmul(self.D.transpose(0, 2, 1), self.D)
        self.ridge, self.n, self.step = ridge, n, step

    def __call__(self, targets: np.ndarray) -> np.ndarray:
        """Fitted values for ``targets`` of shape ``(S, n, m)``."""
        coef = _solve_gram(self.G, np.matmul(self.D.transpose(0, 2, 1), targets), self.ridge, self.n, self.step)
        return np.matmul(self.D, coef)


class _Engine:
    """Forward and backward sweeps. Internally arrays are time-major, ``(n_steps + 1, n_paths)``."""

    def __init__(self, sys: FBSystem, ens: BrownianEnsemble, cfg: SolverConfig):
        if ens.n_inner < cfg.degree + 2:
            raise ValueError(f"need at least {cfg.degree + 2} inner paths per scenario, got {ens.n_inner}")
        self.sys, self.ens, self.cfg = sys, ens, cfg
        self.N, self.dt = ens.grid.n_steps, ens.grid.dt
        self.dW = np.ascontiguousarray(ens.dW.T)
        self.dB = np.ascontiguousarray(ens.dB.T)
        self.W = np.ascontiguousarray(ens.W.T)
        self.Btail = np.ascontiguousarray((ens.B[:, -1:] - ens.B).T)
        self._fwd_ops = {}
        self._proj = {}

    def close(self):
        self._fwd_ops.clear()
        self._proj.clear()

    # forward -------------------------------------------------------------
    def _forward_op(self, i):
        """Row operator giving the two ``dB_i`` loadings of the pooled regression at step ``i``.

        The nuisance features never depend on the iterate, so the operator is
        built once per solve.
        """
        if i not in self._fwd_ops:
            ens, dt = self.ens, self.dt
            w = self.W[i + 1] / math.sqrt(ens.grid.times[i + 1] - ens.grid.t0)
            nuisance = polynomial_basis(_standardized([self.W[i + 1], self.Btail[i + 1]]
                                                      + list(self.sys.extra(i + 1))), self.cfg.degree)
            db = self.dB[i] / math.sqrt(dt)
            D = np.hstack([nuisance, db[:, None], (db * w)[:, None]])
            rows = _solve_gram(D.T @ D, D.T, self.cfg.ridge, D.shape[0], i)[-2:]
            self._fwd_ops[i] = (rows, w)
        return self._fwd_ops[i]

    def forward(self, A, c_prev, C):
        sys, ens, dt, N = self.sys, self.ens, self.dt, self.N
        a = np.empty((N + 1, ens.n_paths))
        c = np.zeros((N + 1, ens.n_paths))
        a[0] = sys.initial
        if sys.forward_coupled:
            if ens.n_outer < 4:
                raise ValueError("a coupled forward equation needs at least 4 outer scenarios "
                                 "to identify its d<-B integrand")
            c[0] = c_prev[0]
        for i in range(N):
            ai, Ai, ci, Ci = a[i], A[i], c[i], C[i]
            pre = ai + sys.drift(i, ai, Ai, ci, Ci) * dt + sys.diffusion(i, ai, Ai, ci, Ci) * self.dW[i]
            if not sys.forward_coupled:
                a[i + 1] = pre
                continue
            rows, w = self._forward_op(i)
            b0, b1 = rows @ pre
            c[i + 1] = (b0 + b1 * w) / math.sqrt(dt)
            a[i + 1] = pre - c[i + 1] * self.dB[i]
        if sys.forward_coupled:
            c[0] = c[1]
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite values in the forward pass")
        return a, c

    # backward ------------------------------------------------------------
    def _projector(self, i, state, frozen):
        if frozen and i in self._proj:
            return self._proj[i]
        S, n = self.ens.n_outer, self.ens.n_inner
        feats = [np.broadcast_to(f, (self.ens.n_paths,)).reshape(S, n)
                 for f in [state[i]] + list(self.sys.extra(i))]
        proj = _Projector(feats, self.cfg.degree, self.cfg.ridge, i)
        if frozen:
            self._proj[i] = proj
        return proj

    def backward(self, a, c, design=None, frozen=False):
        """One backward sweep; ``design`` replaces ``a`` as conditioning state when given.

        With ``frozen`` the per-step projectors are cached and reused by later
        sweeps (the caller promises ``design`` no longer changes).
        """
        sys, ens, dt, N = self.sys, self.ens, self.dt, self.N
        P, S, n = ens.n_paths, ens.n_outer, ens.n_inner
        A = np.empty((N + 1, P))
        C = np.empty((N + 1, P))
        A[N] = sys.terminal(a[N])
        state = a if design is None else design
        nest = lambda *xs: np.stack(xs, axis=-1).reshape(S, n, len(xs))
        flat = lambda x: x.reshape(P, -1)
        for i in range(N - 1, -1, -1):
            proj = self._projector(i, state, frozen)
            G = None
            if i < N - 1:
                G = sys.noise(i, a[i + 1], A[i + 1], c[i + 1], C[i + 1])
                fit = flat(proj(nest(A[i + 1], G)))
                Ahat, Gfit = fit[:, 0], fit[:, 1]
            else:
                Ahat = flat(proj(nest(A[i + 1])))[:, 0]
            # Ahat is known at t_i, so subtracting it leaves E_i[. dW] unchanged and cuts variance
            C[i] = flat(proj(nest((A[i + 1] - Ahat) * self.dW[i] / dt)))[:, 0]
            if G is None:
                C[N] = C[N - 1]
                G = sys.noise(i, a[i + 1], A[i + 1], c[i + 1], C[i + 1])
                Gfit = flat(proj(nest(G)))[:, 0]
            A[i] = Ahat + sys.driver(i, a[i], Ahat, c[i], C[i]) * dt + Gfit * self.dB[i]
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(C))):
            raise FloatingPointError("non-finite values in the backward pass")
        return A, C


def _m2(d: np.ndarray, dt: float) -> float:
    """``E int d^2 dt`` for a path-major array (left-endpoint quadrature)."""
    return float(np.mean(np.sum(d[:, :-1] ** 2, axis=1)) * dt)


def _m2t(d: np.ndarray, dt: float) -> float:
    # same for a time-major array
    return float(np.sum(d[:-1] ** 2) / d.shape[1] * dt)


def solve_system(sys: FBSystem, ens: BrownianEnsemble, cfg: SolverConfig,
                 init: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None) -> _Raw:
    """Damped Picard iteration for ``sys``.

    ``init = (A, c, C)`` (path-major) warm-starts the inputs of the first
    forward pass. The residual is the M^2 distance between successive
    (undamped) iterates of all four processes; the last undamped iterate is
    returned. The conditioning state of the backward regressions follows the
    forward iterate for the first ``cfg.feature_updates`` passes and is then
    frozen, which makes later passes an affine map with fixed projections.
    """
    eng = _Engine(sys, ens, cfg)
    shape = (ens.grid.n_steps + 1, ens.n_paths)
    try:
        if init is None:
            Ab, cb, Cb = np.zeros(shape), np.zeros(shape), np.zeros(shape)
        else:
            Ab, cb, Cb = (np.array(np.asarray(x, dtype=float).T) for x in init)
        prev = None
        history: List[float] = []
        theta, dt = cfg.damping, ens.grid.dt
        for it in range(1, cfg.n_picard_max + 1):
            a, c = eng.forward(Ab, cb, Cb)
            if it <= cfg.feature_updates:
                design = a
            A, C = eng.backward(a, c, design, frozen=it >= cfg.feature_updates)
            if prev is not None:
                res = math.sqrt(sum(_m2t(x - y, dt) for x, y in zip((a, A, c, C), prev)))
            elif init is not None:
                # a warm start carries no forward path; compare the other three
                res = math.sqrt(sum(_m2t(x - y, dt) for x, y in zip((A, c, C), (Ab, cb, Cb))))
            else:
                res = math.sqrt(sum(_m2t(x, dt) for x in (a, A, c, C)))
            history.append(res)
            if res <= cfg.picard_tol:
                return _Raw(a.T.copy(), A.T.copy(), c.T.copy(), C.T.copy(), it, history)
            prev = (a, A, c, C)
            Ab = theta * A + (1 - theta) * Ab
            cb = theta * c + (1 - theta) * cb
            Cb = theta * C + (1 - theta) * Cb
        raise PicardDivergenceError(history, cfg.picard_tol)
    finally:
        eng.close()


# ---------------------------------------------------------------------------
# solution containers

@dataclass(frozen=True, eq=False)
class QuadrupleSolution:
    """Discrete ``(y, Y, z, Z)`` on a nested ensemble."""

    y: ProcessPath
    Y: ProcessPath
    z: ProcessPath
    Z: ProcessPath
    grid: TimeGrid
    control: np.ndarray
    picard_iterations: int
    picard_residual: float
    residual_history: Tuple[float, ...] = ()
    x0: float = 0.0
    ensemble: Optional[BrownianEnsemble] = field(default=None, repr=False)

    def arrays(self):
        return self.y.values, self.Y.values, self.z.values, self.Z.values

    def to_csv(self, path: Union[str, Path], n_inner: Optional[int] = None) -> None:
        n_inner = n_inner or (self.ensemble.n_inner if self.ensemble is not None else self.y.n_paths)
        write_paths_csv(path, ("y", "Y", "z", "Z"), self.arrays(), n_inner)

    def summary(self, cfg: Optional[SolverConfig] = None) -> dict:
        out = {"picard_iterations": self.picard_iterations, "picard_residual": self.picard_residual,
               "residual_history": list(self.residual_history), "x0": self.x0,
               "n_steps": self.grid.n_steps, "T": self.grid.T}
        if self.ensemble is not None:
            out.update(seed=self.ensemble.seed, n_outer=self.ensemble.n_outer, n_inner=self.ensemble.n_inner)
        if cfg is not None:
            out["config"] = asdict(cfg)
        return out


@dataclass(frozen=True, eq=False)
class TripleSolution:
    """Discrete ``(X, Y, Z)`` of the decoupled system."""

    X: ProcessPath
    Y: ProcessPath
    Z: ProcessPath
    grid: TimeGrid
    control: np.ndarray
    x: float = 0.0
    ensemble: Optional[BrownianEnsemble] = field(default=None, repr=False)

    def to_csv(self, path: Union[str, Path], n_inner: Optional[int] = None) -> None:
        n_inner = n_inner or (self.ensemble.n_inner if self.ensemble is not None else self.X.n_paths)
        write_paths_csv(path, ("X", "Y", "Z"), (self.X.values, self.Y.values, self.Z.values), n_inner)


def write_paths_csv(path, names, arrays, n_inner: int) -> None:
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "path", "step"] + list(names))
    P, M = arrays[0].shape
    for p in range(P):
        s, j = divmod(p, n_inner)
        for k in range(M):
            w.writerow([s, j, k] + [repr(float(x[p, k])) for x in arrays])
    atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# public solvers

def _coupled_system(cs: CoefficientSet, x0: float, u: np.ndarray, grid: TimeGrid, P: int) -> FBSystem:
    t = grid.times

    def fwd(name):
        return lambda i, y, Y, z, Z: cs(name, t[i], y, Y, z, Z, u[i])

    return FBSystem(
        drift=fwd("f"), diffusion=fwd("g"), driver=fwd("F"),
        noise=lambda i, y, Y, z, Z: cs("G", t[i + 1], y, Y, z, Z, u[i]),
        initial=np.full(P, float(x0)), terminal=lambda y: cs("h", y),
        forward_coupled=not cs.forward_is_uncoupled(),
    )


def solve_coupled(cs: CoefficientSet, x0: float, control, ens: BrownianEnsemble,
                  cfg: SolverConfig = SolverConfig(),
                  init: Optional["QuadrupleSolution"] = None) -> QuadrupleSolution:
    """Solve the coupled system under a piecewise-constant control.

    ``init`` warm-starts Picard from an earlier solution on the same ensemble.
    Raises :class:`PicardDivergenceError` when the iteration cap is reached.
    """
    if not math.isfinite(x0):
        raise ValueError("x0 must be finite")
    u = as_control(control, ens.grid, cs.control_set)
    sys = _coupled_system(cs, x0, u, ens.grid, ens.n_paths)
    warm = None if init is None else (init.Y.values, init.z.values, init.Z.values)
    raw = solve_system(sys, ens, cfg, warm)
    g = ens.grid
    return QuadrupleSolution(ProcessPath(g, raw.a), ProcessPath(g, raw.A), ProcessPath(g, raw.c),
                             ProcessPath(g, raw.C), g, u, raw.iterations, raw.history[-1],
                             tuple(raw.history), float(x0), ens)


def _bdsde_system(dc: DecoupledCoefficientSet, u: np.ndarray, grid: TimeGrid, X0: np.ndarray) -> FBSystem:
    t = grid.times
    return FBSystem(
        drift=lambda i, x, Y, z, Z: dc("b", x, u[i]),
        diffusion=lambda i, x, Y, z, Z: dc("sigma", x, u[i]),
        driver=lambda i, x, Y, z, Z: dc("f", t[i], x, Y, Z, u[i]),
        noise=lambda i, x, Y, z, Z: dc("g", t[i + 1], x, Y, Z, u[i]),
        initial=X0, terminal=lambda x: dc("htilde", x), forward_coupled=False,
    )


def solve_bdsde(dc: DecoupledCoefficientSet, X: ProcessPath, control, ens: BrownianEnsemble,
                cfg: SolverConfig = SolverConfig()) -> Tuple[ProcessPath, ProcessPath]:
    """Backward regression for ``(Y, Z)`` along a given forward path ``X``."""
    if X.grid != ens.grid or X.n_paths != ens.n_paths:
        raise ValueError("X must live on the ensemble's grid and paths")
    u = as_control(control, ens.grid, dc.control_set)
    eng = _Engine(_bdsde_system(dc, u, ens.grid, X.values[:, 0]), ens, cfg)
    try:
        Xt = np.ascontiguousarray(X.values.T)
        A, C = eng.backward(Xt, np.zeros_like(Xt))
    finally:
        eng.close()
    return ProcessPath(ens.grid, A.T), ProcessPath(ens.grid, C.T)


def solve_decoupled(dc: DecoupledCoefficientSet, x: float, control, ens: BrownianEnsemble,
                    cfg: SolverConfig = SolverConfig()) -> TripleSolution:
    """Forward Euler for ``X`` followed by :func:`solve_bdsde`."""
    if not math.isfinite(x):
        raise ValueError("x must be finite")
    u = as_control(control, ens.grid, dc.control_set)
    sys = _bdsde_system(dc, u, ens.grid, np.full(ens.n_paths, float(x)))
    eng = _Engine(sys, ens, cfg)
    try:
        zeros = np.zeros((ens.grid.n_steps + 1, ens.n_paths))
        X, _ = eng.forward(zeros, zeros, zeros)
        Y, Z = eng.backward(X, zeros)
    finally:
        eng.close()
    g = ens.grid
    return TripleSolution(ProcessPath(g, X.T), ProcessPath(g, Y.T), ProcessPath(g, Z.T), g, u, float(x), ens)


# ---------------------------------------------------------------------------
# costs and diagnostics

def scenario_se(values: np.ndarray, n_outer: int) -> float:
    """Standard error of the mean of per-path values, clustered by B-scenario."""
    v = np.asarray(values, dtype=float)
    if n_outer > 1 and v.size % n_outer == 0 and v.size > n_outer:
        m = v.reshape(n_outer, -1).mean(axis=1)
        return float(m.std(ddof=1) / math.sqrt(n_outer))
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


def cost_paths(cs: CoefficientSet, sol: QuadrupleSolution, control=None) -> np.ndarray:
    """Per-path cost ``int l dt + Phi(y_T) + gamma(Y_0)`` (left-endpoint quadrature)."""
    u = sol.control if control is None else as_control(control, sol.grid)
    t = sol.grid.times[:-1]
    y, Y, z, Z = (x[:, :-1] for x in sol.arrays())
    run = cs("l", t, y, Y, z, Z, u).sum(axis=1) * sol.grid.dt
    out = run + cs("Phi", sol.y.values[:, -1]) + cs("gamma", sol.Y.values[:, 0])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite cost values")
    return out


def cost_functional(cs: CoefficientSet, sol: QuadrupleSolution, control=None) -> Tuple[float, float]:
    """Monte Carlo estimate of the cost and its standard error."""
    v = cost_paths(cs, sol, control)
    n_outer = sol.ensemble.n_outer if sol.ensemble is not None else 1
    return float(v.mean()), scenario_se(v, n_outer)


def decoupled_cost(dc: DecoupledCoefficientSet, sol: TripleSolution) -> Tuple[float, float]:
    """``E[int l ds + gamma(Y(t0))]`` for the decoupled system."""
    t = sol.grid.times[:-1]
    X, Y, Z = sol.X.values[:, :-1], sol.Y.values[:, :-1], sol.Z.values[:, :-1]
    v = dc("l", t, X, Y, Z, sol.control).sum(axis=1) * sol.grid.dt + dc("gamma", sol.Y.values[:, 0])
    n_outer = sol.ensemble.n_outer if sol.ensemble is not None else 1
    return float(v.mean()), scenario_se(v, n_outer)


def discrete_defect(cs: CoefficientSet, sol: QuadrupleSolution, cfg: SolverConfig = SolverConfig()) -> Tuple[float, float]:
    """M^2 norms of the forward and backward step defects after re-substitution.

    The forward defect recomputes ``y_{i+1}`` from the returned ``(y, Y, z, Z)``;
    the backward defect re-runs one backward regression sweep on the returned
    ``(y, z)`` and compares with ``Y``.
    """
    ens = sol.ensemble
    if ens is None:
        raise ValueError("solution carries no ensemble")
    y, Y, z, Z = sol.arrays()
    u, t, dt = sol.control, sol.grid.times, sol.grid.dt
    fd = np.zeros_like(y)
    for i in range(sol.grid.n_steps):
        a = (t[i], y[:, i], Y[:, i], z[:, i], Z[:, i], u[i])
        fd[:, i] = y[:, i + 1] - (y[:, i] + cs("f", *a) * dt + cs("g", *a) * ens.dW[:, i] - z[:, i + 1] * ens.dB[:, i])
    eng = _Engine(_coupled_system(cs, sol.x0, u, sol.grid, ens.n_paths), ens, cfg)
    try:
        A, C = eng.backward(np.ascontiguousarray(y.T), np.ascontiguousarray(z.T))
    finally:
        eng.close()
    return math.sqrt(_m2(fd, dt)), math.sqrt(_m2(A.T - Y, dt) + _m2(C.T - Z, dt))


def write_json(path: Union[str, Path], obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
