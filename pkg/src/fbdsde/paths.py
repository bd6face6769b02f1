"""Brownian ensembles on a uniform grid and forward/backward Ito quadrature.

Two independent motions are simulated: ``W`` drives the forward (increasing)
filtration and ``B`` the backward (decreasing) one. Forward integrals use the
left endpoint of every step, backward integrals the right endpoint. Every
other module relies on that convention.

Ensembles are laid out as ``n_outer`` scenarios of ``n_inner`` paths each.
In a nested ensemble all paths of one scenario share the same ``B``
increments, so quantities that depend on the future of ``B`` can be
estimated by regression inside a scenario. A flat ensemble
(:func:`generate_ensemble`) gives every path its own ``B``.
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

__all__ = [
    "TimeGrid",
    "BrownianEnsemble",
    "ProcessPath",
    "ItoDecomposition",
    "ItoReport",
    "generate_ensemble",
    "generate_nested_ensemble",
    "coarsen",
    "forward_ito_integral",
    "backward_ito_integral",
    "verify_ito_formula",
    "atomic_write",
]

_W_STREAM = 0
_B_STREAM = 1
# paths per random stream in flat ensembles; fixed so results never depend on worker count
_FLAT_BLOCK = 4096


def atomic_write(path: Union[str, Path], data: Union[str, bytes]) -> None:
    """Write ``data`` (text or bytes) to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with (os.fdopen(fd, "wb") if isinstance(data, bytes) else os.fdopen(fd, "w", newline="")) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 < t1 < ... < tN = T``."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and math.isfinite(self.T)):
            raise ValueError("grid endpoints must be finite")
        if not self.t0 < self.T:
            raise ValueError(f"need t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Grid index of ``t``; raises if ``t`` is not (numerically) a grid point."""
        k = (t - self.t0) / self.dt
        i = int(round(k))
        if abs(k - i) > 1e-9 or not 0 <= i <= self.n_steps:
            raise ValueError(f"t={t} is not a point of {self}")
        return i

    def tail(self, start: int) -> "TimeGrid":
        """Sub-grid from index ``start`` to the horizon."""
        return TimeGrid(float(self.times[start]), self.T, self.n_steps - start)


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    """Increments of ``W`` and ``B``, each of shape ``(n_paths, n_steps)``.

    Path ``p`` belongs to scenario ``p // n_inner``. Only increments are stored;
    path values are prefix sums.
    """

    grid: TimeGrid
    dW: np.ndarray
    dB: np.ndarray
    seed: int
    n_outer: int
    n_inner: int

    def __post_init__(self):
        shape = (self.n_outer * self.n_inner, self.grid.n_steps)
        if self.dW.shape != shape or self.dB.shape != shape:
            raise ValueError(f"increments must have shape {shape}")
        self.dW.setflags(write=False)
        self.dB.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.n_outer * self.n_inner

    @property
    def W(self) -> np.ndarray:
        return _prefix(self.dW)

    @property
    def B(self) -> np.ndarray:
        return _prefix(self.dB)

    def nested(self, a: np.ndarray) -> np.ndarray:
        """View a per-path array as ``(n_outer, n_inner, ...)``."""
        return a.reshape(self.n_outer, self.n_inner, *a.shape[1:])

    def tail(self, start: int) -> "BrownianEnsemble":
        """The same noise restricted to ``[t_start, T]``."""
        return BrownianEnsemble(self.grid.tail(start), self.dW[:, start:].copy(),
                                self.dB[:, start:].copy(), self.seed, self.n_outer, self.n_inner)

    def to_csv(self, path: Union[str, Path]) -> None:
        """Dump increments path-major, step-minor (written atomically)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "path", "step", "dW", "dB"])
        for p in range(self.n_paths):
            s, j = divmod(p, self.n_inner)
            for k in range(self.grid.n_steps):
                w.writerow([s, j, k, repr(float(self.dW[p, k])), repr(float(self.dB[p, k]))])
        atomic_write(path, buf.getvalue())

    def to_binary(self, path: Union[str, Path]) -> None:
        """Flat little-endian float64 dump: all dW rows, then all dB rows."""
        atomic_write(path, np.concatenate([self.dW.ravel(), self.dB.ravel()]).astype("<f8").tobytes())


def _prefix(d: np.ndarray) -> np.ndarray:
    out = np.zeros((d.shape[0], d.shape[1] + 1))
    np.cumsum(d, axis=1, out=out[:, 1:])
    return out


def _normals(seed: int, motion: int, index: int, shape) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(motion, index))
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


def _check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return seed


def _run(tasks, threads: int):
    if threads <= 1:
        for task in tasks:
            task()
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda fn: fn(), tasks))


def generate_ensemble(grid: TimeGrid, n_paths: int, seed: int, *, threads: int = 1) -> BrownianEnsemble:
    """Flat ensemble: every path carries its own ``W`` and ``B``.

    Streams are Philox generators keyed by ``(seed, motion, block)`` with a
    fixed block size, so the output is identical for any ``threads``.
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise ValueError(f"n_paths must be a positive integer, got {n_paths}")
    seed = _check_seed(seed)
    n, sq = grid.n_steps, math.sqrt(grid.dt)
    dW = np.empty((n_paths, n))
    dB = np.empty((n_paths, n))

    def block(b):
        lo, hi = b * _FLAT_BLOCK, min((b + 1) * _FLAT_BLOCK, n_paths)

        def task():
            dW[lo:hi] = sq * _normals(seed, _W_STREAM, b, (hi - lo, n))
            dB[lo:hi] = sq * _normals(seed, _B_STREAM, b, (hi - lo, n))
        return task

    _run([block(b) for b in range(-(-n_paths // _FLAT_BLOCK))], threads)
    return BrownianEnsemble(grid, dW, dB, seed, n_paths, 1)


def generate_nested_ensemble(grid: TimeGrid, n_outer: int, n_inner: int, seed: int, *,
                             threads: int = 1) -> BrownianEnsemble:
    """``n_outer`` B-scenarios, each with ``n_inner`` independent W-paths.

    Scenario ``s`` draws its W block from stream ``(seed, W, s)`` and its single
    B path from ``(seed, B, s)``.
    """
    for name, val in (("n_outer", n_outer), ("n_inner", n_inner)):
        if int(val) != val or val < 1:
            raise ValueError(f"{name} must be a positive integer, got {val}")
    seed = _check_seed(seed)
    n, sq = grid.n_steps, math.sqrt(grid.dt)
    dW = np.empty((n_outer * n_inner, n))
    dB = np.empty((n_outer * n_inner, n))

    def scenario(s):
        lo, hi = s * n_inner, (s + 1) * n_inner

        def task():
            dW[lo:hi] = sq * _normals(seed, _W_STREAM, s, (n_inner, n))
            dB[lo:hi] = sq * _normals(seed, _B_STREAM, s, (n,))
        return task

    _run([scenario(s) for s in range(n_outer)], threads)
    return BrownianEnsemble(grid, dW, dB, seed, n_outer, n_inner)


def coarsen(ens: BrownianEnsemble, factor: int) -> BrownianEnsemble:
    """Same paths on a grid ``factor`` times coarser (increments summed)."""
    n = ens.grid.n_steps
    if n % factor:
        raise ValueError(f"{n} steps not divisible by {factor}")
    g = TimeGrid(ens.grid.t0, ens.grid.T, n // factor)
    agg = lambda d: d.reshape(d.shape[0], n // factor, factor).sum(axis=2)
    return BrownianEnsemble(g, agg(ens.dW), agg(ens.dB), ens.seed, ens.n_outer, ens.n_inner)


@dataclass(frozen=True, eq=False)
class ProcessPath:
    """Values of one scalar process, shape ``(n_paths, n_steps + 1)``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.grid.n_steps + 1:
            raise ValueError(f"values must have shape (n_paths, {self.grid.n_steps + 1}), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("process values must be finite")
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: TimeGrid, n_paths: int, c: float) -> "ProcessPath":
        return cls(grid, np.full((n_paths, grid.n_steps + 1), float(c)))

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def m2_norm(self) -> float:
        """``(E int |v|^2 dt)^(1/2)`` with left-endpoint quadrature."""
        return math.sqrt(np.mean(np.sum(self.values[:, :-1] ** 2, axis=1)) * self.grid.dt)


def _check(u: ProcessPath, ens: BrownianEnsemble) -> None:
    if u.grid != ens.grid or u.n_paths != ens.n_paths:
        raise ValueError(f"integrand on {u.grid} with {u.n_paths} paths does not match "
                         f"ensemble on {ens.grid} with {ens.n_paths} paths")


def forward_ito_integral(u: ProcessPath, ens: BrownianEnsemble) -> ProcessPath:
    """``int_{t0}^{t_k} u dW`` as left-endpoint sums; zero at ``t0``."""
    _check(u, ens)
    return ProcessPath(ens.grid, _prefix(u.values[:, :-1] * ens.dW))


def backward_ito_integral(v: ProcessPath, ens: BrownianEnsemble) -> ProcessPath:
    """``int_{t_k}^T v d<-B`` as right-endpoint sums accumulated from ``T``; zero at ``T``."""
    _check(v, ens)
    terms = v.values[:, 1:] * ens.dB
    out = np.zeros_like(v.values)
    out[:, :-1] = np.cumsum(terms[:, ::-1], axis=1)[:, ::-1]
    return ProcessPath(ens.grid, out)


@dataclass(frozen=True, eq=False)
class ItoDecomposition:
    """``alpha_t = alpha0 + int beta ds + int gamma d<-B + int delta dW``.

    ``alpha0`` may be a scalar or a per-path array (it is measurable with
    respect to the whole future of ``B``).
    """

    alpha0: Union[float, np.ndarray]
    beta: ProcessPath
    gamma: ProcessPath
    delta: ProcessPath

    def __post_init__(self):
        g = self.beta.grid
        if not (self.gamma.grid == g == self.delta.grid
                and self.beta.n_paths == self.gamma.n_paths == self.delta.n_paths):
            raise ValueError("beta, gamma and delta must share grid and path count")


@dataclass
class ItoReport:
    alpha: np.ndarray
    pathwise_residual: np.ndarray      # per path, per grid point
    l2_residual: np.ndarray            # (E res^2)^(1/2) per grid point
    max_l2_residual: float
    mean_square_residual: float        # E res^2 at the grid point of the max
    expectation_gap: np.ndarray        # E|a_t|^2 - (E|a_0|^2 + 2E int ab - E int g^2 + E int d^2)
    expectation_se: np.ndarray
    max_expectation_z: float = field(default=0.0)


def verify_ito_formula(dec: ItoDecomposition, ens: BrownianEnsemble) -> ItoReport:
    """Check the doubly stochastic Ito formula for ``|alpha|^2`` pathwise and in mean.

    The pathwise identity pairs ``alpha`` with ``gamma d<-B`` at the right
    endpoint and with ``delta dW`` at the left endpoint. The expectation form
    drops both stochastic integrals and so is only meaningful for adapted
    decompositions.
    """
    for p in (dec.beta, dec.gamma, dec.delta):
        _check(p, ens)
    dt = ens.grid.dt
    a0 = np.broadcast_to(np.asarray(dec.alpha0, dtype=float), (ens.n_paths,))
    b, g, d = dec.beta.values, dec.gamma.values, dec.delta.values
    incr = b[:, :-1] * dt + g[:, 1:] * ens.dB + d[:, :-1] * ens.dW
    alpha = a0[:, None] + _prefix(incr)
    if not np.all(np.isfinite(alpha)):
        raise FloatingPointError("non-finite reconstruction of alpha")

    drift = _prefix(alpha[:, :-1] * b[:, :-1] * dt)
    g2 = _prefix(g[:, 1:] ** 2 * dt)
    d2 = _prefix(d[:, :-1] ** 2 * dt)
    rhs = (a0 ** 2)[:, None] + 2 * drift + 2 * _prefix(alpha[:, 1:] * g[:, 1:] * ens.dB) \
        + 2 * _prefix(alpha[:, :-1] * d[:, :-1] * ens.dW) - g2 + d2
    res = alpha ** 2 - rhs
    l2 = np.sqrt(np.mean(res ** 2, axis=0))
    k = int(np.argmax(l2))

    gap_paths = alpha ** 2 - ((a0 ** 2)[:, None] + 2 * drift - g2 + d2)
    gap = gap_paths.mean(axis=0)
    se = gap_paths.std(axis=0, ddof=1) / math.sqrt(ens.n_paths) if ens.n_paths > 1 else np.zeros_like(gap)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(gap) / se, np.where(np.abs(gap) > 1e-12, np.inf, 0.0))
    return ItoReport(alpha, res, l2, float(l2[k]), float(np.mean(res[:, k] ** 2)), gap, se, float(z.max()))
