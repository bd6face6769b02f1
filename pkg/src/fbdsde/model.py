"""Coefficient sets of controlled FBDSDEs and sampled checks of their standing assumptions.

A :class:`CoefficientSet` holds the fully coupled system

    dy = f dt + g dW - z d<-B,          y(0) = x0,
    dY = -F dt - G d<-B + Z dW,         Y(T) = h(y(T)),

with running cost ``l``, terminal cost ``Phi`` and initial cost ``gamma``,
all first partials, and an interval control set. A
:class:`DecoupledCoefficientSet` holds the forward SDE + BDSDE system used for
the SPDE representation. Assumption checks draw random pairs from a box: they
give estimates, never proofs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from .expressions import Expression

__all__ = [
    "ControlSet", "CoefficientSet", "DecoupledCoefficientSet", "SamplerConfig",
    "AssumptionReport", "DerivativeReport", "check_lipschitz", "check_monotonicity",
    "check_derivative_consistency", "lq_model", "nonlinear_model", "linear_model",
    "reaction_diffusion_model", "heat_model", "COUPLED_ARGS", "DECOUPLED_ARGS",
]

COUPLED_ARGS = ("t", "y", "Y", "z", "Z", "v")
DECOUPLED_ARGS = ("t", "x", "Y", "Z", "v")
STATE_VARS = ("y", "Y", "z", "Z")

_COUPLED_SIGNATURES = {
    "f": COUPLED_ARGS, "g": COUPLED_ARGS, "F": COUPLED_ARGS, "G": COUPLED_ARGS, "l": COUPLED_ARGS,
    "h": ("y",), "Phi": ("y",), "gamma": ("Y",),
}
_DECOUPLED_SIGNATURES = {
    "b": ("x", "v"), "sigma": ("x", "v"), "f": DECOUPLED_ARGS, "g": DECOUPLED_ARGS,
    "l": DECOUPLED_ARGS, "htilde": ("x",), "gamma": ("Y",),
}


@dataclass(frozen=True)
class ControlSet:
    """Closed interval ``[lo, hi]``."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo > self.hi:
            raise ValueError(f"control set [{self.lo}, {self.hi}] must be a nonempty finite interval")

    def project(self, v):
        return np.clip(v, self.lo, self.hi)

    def contains(self, v, tol: float = 0.0) -> bool:
        v = np.asarray(v)
        return bool(np.all((v >= self.lo - tol) & (v <= self.hi + tol)))


def _evaluate(fn: Callable, args) -> np.ndarray:
    out = fn(*args)
    shape = np.broadcast(*[np.asarray(a) for a in args]).shape if args else ()
    return np.broadcast_to(np.asarray(out, dtype=float), shape)


class _Coefficients:
    _signatures: Mapping[str, Tuple[str, ...]] = {}

    def __call__(self, name: str, *args) -> np.ndarray:
        return _evaluate(self.fns[name], args)

    def d(self, name: str, var: str, *args) -> np.ndarray:
        """Partial derivative ``name_var`` evaluated at ``args``."""
        return _evaluate(self.partials[f"{name}_{var}"], args)

    def d_raw(self, name: str, var: str, *args):
        """Like :meth:`d` but returns a plain float when the partial is a constant expression."""
        fn = self.partials[f"{name}_{var}"]
        const = getattr(fn, "constant", None)
        return const if const is not None else _evaluate(fn, args)

    def with_function(self, key: str, fn: Callable):
        """Copy with one function or partial (``"f"``, ``"f_y"``, ...) replaced."""
        if key in self.fns:
            return replace(self, fns={**self.fns, key: fn})
        if key in self.partials:
            return replace(self, partials={**self.partials, key: fn})
        raise KeyError(key)

    @classmethod
    def _compile(cls, exprs: Mapping[str, str], params):
        missing = set(cls._signatures) - set(exprs)
        extra = set(exprs) - set(cls._signatures)
        if missing or extra:
            raise ValueError(f"missing functions {sorted(missing)}, unknown {sorted(extra)}")
        fns, partials, parsed = {}, {}, {}
        for name, sig in cls._signatures.items():
            e = Expression(str(exprs[name]), sig, params)
            parsed[name] = e
            fns[name] = e
            for var in sig:
                if var != "t":
                    partials[f"{name}_{var}"] = e.derivative(var)
        return fns, partials, parsed


@dataclass(frozen=True, eq=False)
class CoefficientSet(_Coefficients):
    """Coefficients of the coupled system; evaluate with ``cs("f", t, y, Y, z, Z, v)``.

    ``A(t, zeta) = (-F, f, -G, g)`` with ``zeta = (y, Y, z, Z)`` is the vector
    field the monotonicity conditions are stated for.
    """

    fns: Mapping[str, Callable]
    partials: Mapping[str, Callable]
    control_set: ControlSet
    name: str = "custom"
    expressions: Optional[Mapping[str, str]] = None
    _signatures = _COUPLED_SIGNATURES

    @classmethod
    def from_expressions(cls, exprs: Mapping[str, str], control_set: ControlSet,
                         params: Optional[Mapping[str, float]] = None, name: str = "expression"):
        fns, partials, _ = cls._compile(exprs, params)
        return cls(fns, partials, control_set, name, dict(exprs))

    def A(self, t, y, Y, z, Z, v) -> np.ndarray:
        a = (t, y, Y, z, Z, v)
        return np.stack([-self("F", *a), self("f", *a), -self("G", *a), self("g", *a)], axis=-1)

    def forward_is_uncoupled(self, n_probe: int = 64, seed: int = 0) -> bool:
        """True when sampled ``f``, ``g`` partials in ``(Y, z, Z)`` all vanish.

        Then the forward equation is a plain SDE and its ``d<-B`` integrand is zero.
        """
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-2.0, 2.0, size=(5, n_probe))
        t = rng.uniform(0.0, 1.0, n_probe)
        v = rng.uniform(self.control_set.lo, self.control_set.hi, n_probe)
        args = (t, pts[0], pts[1], pts[2], pts[3], v)
        return all(np.all(self.d(fn, var, *args) == 0.0) for fn in ("f", "g") for var in ("Y", "z", "Z"))


@dataclass(frozen=True, eq=False)
class DecoupledCoefficientSet(_Coefficients):
    """Forward SDE ``dX = b dt + sigma dW`` and BDSDE

    ``Y(s) = htilde(X_T) + int_s^T f dr + int_s^T g d<-B - int_s^T Z dW``.
    Cost ``E[int l ds + gamma(Y(t))]``.
    """

    fns: Mapping[str, Callable]
    partials: Mapping[str, Callable]
    control_set: ControlSet
    name: str = "custom"
    expressions: Optional[Mapping[str, str]] = None
    _signatures = _DECOUPLED_SIGNATURES

    @classmethod
    def from_expressions(cls, exprs: Mapping[str, str], control_set: ControlSet,
                         params: Optional[Mapping[str, float]] = None, name: str = "expression"):
        fns, partials, _ = cls._compile(exprs, params)
        return cls(fns, partials, control_set, name, dict(exprs))

    def as_coupled(self) -> CoefficientSet:
        """The same problem written as a coupled system with ``y = X`` and no ``z``.

        ``f -> b``, ``g -> sigma``, ``F -> f``, ``G -> g``, ``h -> htilde``,
        ``Phi -> 0``; the ``z`` slot is ignored everywhere.
        """
        s = self
        fwd = lambda name: (lambda t, y, Y, z, Z, v: s(name, y, v))
        bwd = lambda name: (lambda t, y, Y, z, Z, v: s(name, t, y, Y, Z, v))
        zero6 = lambda t, y, Y, z, Z, v: np.zeros(np.broadcast(t, y, Y, z, Z, v).shape)
        fns = {"f": fwd("b"), "g": fwd("sigma"), "F": bwd("f"), "G": bwd("g"), "l": bwd("l"),
               "h": lambda y: s("htilde", y), "Phi": lambda y: np.zeros(np.shape(y)),
               "gamma": lambda Y: s("gamma", Y)}
        partials = {"h_y": lambda y: s.d("htilde", "x", y), "Phi_y": lambda y: np.zeros(np.shape(y)),
                    "gamma_Y": lambda Y: s.d("gamma", "Y", Y)}
        for new, old in (("f", "b"), ("g", "sigma")):
            partials[f"{new}_y"] = (lambda o: lambda t, y, Y, z, Z, v: s.d(o, "x", y, v))(old)
            partials[f"{new}_v"] = (lambda o: lambda t, y, Y, z, Z, v: s.d(o, "v", y, v))(old)
            for var in ("Y", "z", "Z"):
                partials[f"{new}_{var}"] = zero6
        for new, old in (("F", "f"), ("G", "g"), ("l", "l")):
            for nv, ov in (("y", "x"), ("Y", "Y"), ("Z", "Z"), ("v", "v")):
                partials[f"{new}_{nv}"] = (lambda o, w: lambda t, y, Y, z, Z, v: s.d(o, w, t, y, Y, Z, v))(old, ov)
            partials[f"{new}_z"] = zero6
        return CoefficientSet(fns, partials, self.control_set, f"{self.name}:coupled")


# ---------------------------------------------------------------------------
# built-in models

def lq_model() -> CoefficientSet:
    """Linear-quadratic benchmark on ``U = [-1, 1]``; optimum is ``u = 0`` with zero state."""
    return CoefficientSet.from_expressions({
        "f": "0", "g": "z - Z + v", "F": "0", "G": "z + Z + v", "h": "0",
        "l": "0.5*(y**2 + Y**2 + z**2 + Z**2 + v**2)", "Phi": "0.5*y**2", "gamma": "0.5*Y**2",
    }, ControlSet(-1.0, 1.0), name="lq")


def nonlinear_model() -> CoefficientSet:
    """Smooth nonlinear coupled test model with a saturated cubic drift."""
    return CoefficientSet.from_expressions({
        "f": "-y - 0.2*y**3/(1 + y**2) + 0.2*Y + 0.5*v",
        "g": "0.4*v + 0.1*sin(y)",
        "F": "0.5*Y + 0.3*tanh(y) + 0.2*v",
        "G": "0.2*Y + 0.1*z + 0.3*v",
        "h": "0.5*y",
        "l": "0.5*(y**2 + Y**2 + z**2 + Z**2 + v**2)",
        "Phi": "0.5*y**2", "gamma": "0.5*Y**2",
    }, ControlSet(-1.0, 1.0), name="nonlinear")


def linear_model(matrix, control_set: ControlSet = ControlSet(-1.0, 1.0), h: str = "0") -> CoefficientSet:
    """Coefficients with ``A(t, zeta) = matrix @ zeta`` and zero costs."""
    m = np.asarray(matrix, dtype=float)
    if m.shape != (4, 4):
        raise ValueError("matrix must be 4x4")
    row = lambda r: " + ".join(f"({float(c)!r})*{s}" for c, s in zip(r, STATE_VARS))
    # A = (-F, f, -G, g)
    return CoefficientSet.from_expressions({
        "F": f"-({row(m[0])})", "f": row(m[1]), "G": f"-({row(m[2])})", "g": row(m[3]),
        "h": h, "l": "0", "Phi": "0", "gamma": "0",
    }, control_set, name="linear")


def reaction_diffusion_model(gamma_exp: float = 2.0, v_max: float = 2.0, f_sign: float = 1.0,
                             g_sign: float = 1.0) -> DecoupledCoefficientSet:
    """Controlled stochastic reaction-diffusion example in FBDSDE form.

    ``dX = v dW``, ``Y(s) = X_T + int (Y + Z) dr + int Y d<-B - int Z dW`` and
    cost ``E[int v^gamma/gamma ds + Y(0)]`` on ``U = [0, v_max]``. The signs
    of the ``dr`` and ``d<-B`` terms can be flipped to probe sensitivity.
    """
    if gamma_exp < 1:
        raise ValueError("gamma exponent must be >= 1")
    return DecoupledCoefficientSet.from_expressions({
        "b": "0", "sigma": "v", "f": "fs*(Y + Z)", "g": "gs*Y", "htilde": "x",
        "l": "v**p/p", "gamma": "Y",
    }, ControlSet(0.0, float(v_max)), params={"p": float(gamma_exp), "fs": float(f_sign), "gs": float(g_sign)},
        name="reaction_diffusion")


def heat_model(terminal: str = "x**2") -> DecoupledCoefficientSet:
    """``dX = dW``, no driver: ``u(t, x) = E[htilde(x + W_{T-t})]``."""
    return DecoupledCoefficientSet.from_expressions({
        "b": "0", "sigma": "1", "f": "0", "g": "0", "htilde": terminal, "l": "0", "gamma": "0",
    }, ControlSet(-1.0, 1.0), name="heat")


# ---------------------------------------------------------------------------
# sampled assumption checks

@dataclass(frozen=True)
class SamplerConfig:
    """Uniform sampling box for ``(y, Y, z, Z)``; ``t`` in ``[0, T]``, ``v`` in the control set."""

    n_samples: int = 20000
    seed: int = 0
    half_width: float = 2.0
    T: float = 1.0
    axis_pairs: bool = True

    def __post_init__(self):
        if self.n_samples < 1 or not (self.half_width > 0 and math.isfinite(self.half_width)):
            raise ValueError("degenerate sampling domain")
        if not self.T > 0:
            raise ValueError("degenerate sampling domain: T must be positive")


def _pairs(cs: CoefficientSet, cfg: SamplerConfig):
    rng = np.random.default_rng(cfg.seed)
    n, w = cfg.n_samples, cfg.half_width
    u = rng.random((n, 10))
    t = u[:, 0] * cfg.T
    v = cs.control_set.lo + u[:, 1] * (cs.control_set.hi - cs.control_set.lo)
    a = -w + 2 * w * u[:, 2:6]
    b = -w + 2 * w * u[:, 6:10]
    if cfg.axis_pairs:
        # pairs differing in one coordinate only; these expose degenerate directions
        m = max(n // 10, 4)
        axis = np.arange(m) % 4
        base = -w + 2 * w * rng.random((m, 4))
        other = base.copy()
        other[np.arange(m), axis] = -w + 2 * w * rng.random(m)
        a, b = np.vstack([a, base]), np.vstack([b, other])
        t = np.concatenate([t, rng.random(m) * cfg.T])
        v = np.concatenate([v, cs.control_set.lo + rng.random(m) * (cs.control_set.hi - cs.control_set.lo)])
    keep = np.linalg.norm(a - b, axis=1) > 1e-12
    return t[keep], v[keep], a[keep], b[keep]


@dataclass
class AssumptionReport:
    lipschitz_estimate: float = float("nan")
    h_lipschitz_estimate: float = float("nan")
    monotonicity_estimate: float = float("nan")
    sup_q: float = float("nan")
    inf_q: float = float("nan")
    direction_of_monotonicity: str = "neither"
    weakly_monotone: Optional[str] = None
    h_monotone: Optional[bool] = None
    samples_used: int = 0
    provenance: str = "sampled, not proven"


def check_lipschitz(cs: CoefficientSet, cfg: SamplerConfig = SamplerConfig()) -> AssumptionReport:
    """Largest sampled difference quotient of ``A`` (same ``t, v``) and of ``h``."""
    t, v, a, b = _pairs(cs, cfg)
    dA = cs.A(t, *a.T, v) - cs.A(t, *b.T, v)
    k = np.linalg.norm(dA, axis=1) / np.linalg.norm(a - b, axis=1)
    dy = a[:, 0] - b[:, 0]
    ok = np.abs(dy) > 1e-12
    kh = np.abs(cs("h", a[ok, 0]) - cs("h", b[ok, 0])) / np.abs(dy[ok])
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(kh))):
        raise FloatingPointError("non-finite coefficient values in the sampling box")
    return AssumptionReport(lipschitz_estimate=float(k.max()), h_lipschitz_estimate=float(kh.max(initial=0.0)),
                            samples_used=len(t))


def check_monotonicity(cs: CoefficientSet, cfg: SamplerConfig = SamplerConfig(),
                       tol: float = 1e-9) -> AssumptionReport:
    """Classify ``q = <A(zeta) - A(zeta'), zeta - zeta'> / |zeta - zeta'|^2``.

    ``H3`` if ``sup q < -tol`` (estimate ``mu = -sup q``), ``H'3`` if
    ``inf q > tol`` (``mu = inf q``), otherwise ``neither``. ``weakly_monotone``
    records ``"H3"`` / ``"H'3"`` when only the non-strict inequality holds.
    ``h_monotone`` checks the sign of ``<h(y) - h(y'), y - y'>`` matching the
    direction (``>= 0`` for H3, ``<= 0`` for H'3).
    """
    rep = check_lipschitz(cs, cfg)
    t, v, a, b = _pairs(cs, cfg)
    d = a - b
    q = np.einsum("ij,ij->i", cs.A(t, *a.T, v) - cs.A(t, *b.T, v), d) / np.einsum("ij,ij->i", d, d)
    sup_q, inf_q = float(q.max()), float(q.min())
    hy = (cs("h", a[:, 0]) - cs("h", b[:, 0])) * d[:, 0]
    if sup_q < -tol:
        direction, mu, h_ok = "H3", -sup_q, bool(np.all(hy >= -tol))
    elif inf_q > tol:
        direction, mu, h_ok = "H'3", inf_q, bool(np.all(hy <= tol))
    else:
        direction, mu = "neither", max(-sup_q, inf_q)
        h_ok = bool(np.all(hy >= -tol)) if sup_q <= tol else bool(np.all(hy <= tol)) if inf_q >= -tol else False
    weak = "H3" if sup_q <= tol else "H'3" if inf_q >= -tol else None
    rep.monotonicity_estimate, rep.sup_q, rep.inf_q = mu, sup_q, inf_q
    rep.direction_of_monotonicity, rep.weakly_monotone, rep.h_monotone = direction, weak, h_ok
    return rep


@dataclass
class DerivativeReport:
    max_errors: Dict[str, float]
    tolerance: float
    step: float
    failures: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures


def check_derivative_consistency(cs, cfg: SamplerConfig = SamplerConfig(n_samples=2000),
                                 step: float = 1e-4, tol: float = 1e-5) -> DerivativeReport:
    """Compare every provided partial with a central difference on sampled points.

    The error is relative: ``|d - fd| / max(1, |fd|)``. Works for coupled and
    decoupled coefficient sets.
    """
    rng = np.random.default_rng(cfg.seed)
    n, w = cfg.n_samples, cfg.half_width
    lo, hi = cs.control_set.lo, cs.control_set.hi
    # keep v +- step inside U so one-sided domains (v**p with v >= 0) stay valid
    vlo, vhi = lo + step if hi - lo > 4 * step else lo, hi - step if hi - lo > 4 * step else hi
    sample = {"t": rng.random(n) * cfg.T, "v": vlo + rng.random(n) * (vhi - vlo)}
    for var in ("x", "y", "Y", "z", "Z"):
        sample[var] = -w + 2 * w * rng.random(n)
    errors, failures = {}, {}
    for name, sig in cs._signatures.items():
        args = [sample[s] for s in sig]
        for j, var in enumerate(sig):
            key = f"{name}_{var}"
            if var == "t" or key not in cs.partials:
                continue
            up, dn = list(args), list(args)
            up[j], dn[j] = args[j] + step, args[j] - step
            fd = (cs(name, *up) - cs(name, *dn)) / (2 * step)
            got = cs.d(name, var, *args)
            if not (np.all(np.isfinite(fd)) and np.all(np.isfinite(got))):
                raise FloatingPointError(f"non-finite values while checking {key}")
            err = float(np.max(np.abs(got - fd) / np.maximum(1.0, np.abs(fd))))
            errors[key] = err
            if err > tol:
                failures[key] = err
    return DerivativeReport(errors, tol, step, failures)
