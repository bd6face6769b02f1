"""Run configuration: TOML text in, validated dataclasses out, and back.

Every section maps to a frozen dataclass. Unknown keys and type mismatches
are rejected with the dotted key and its line number; the ensemble seed is
mandatory so that each run is reproducible.
"""
from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import tomli
import tomli_w

from .maximum_principle import OptimizerConfig
from .model import (CoefficientSet, ControlSet, DecoupledCoefficientSet, SamplerConfig, heat_model, lq_model,
                    nonlinear_model, reaction_diffusion_model)
from .solver import SolverConfig

__all__ = ["ConfigError", "RunConfig", "ModelSpec", "GridSpec", "EnsembleSpec", "ControlSpec", "FieldSpec",
           "BenchmarkSpec", "OutputSpec", "parse_config", "serialize_config", "load_config"]

MAX_SEED = 2 ** 64


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted key and ``line`` its 1-based line (if known)."""

    def __init__(self, msg: str, key: Optional[str] = None, line: Optional[int] = None):
        where = ""
        if key is not None:
            where = f"{key!r}" + (f" (line {line})" if line else "")
            msg = f"{where}: {msg}"
        super().__init__(msg)
        self.key, self.line = key, line


MODEL_NAMES = ("lq", "nonlinear", "reaction-diffusion", "heat", "custom")


@dataclass(frozen=True)
class ModelSpec:
    name: str = "lq"
    x0: float = 0.0
    # reaction-diffusion
    gamma_exp: float = 2.0
    v_max: float = 2.0
    f_sign: float = 1.0
    g_sign: float = 1.0
    # heat
    terminal: str = "x**2"
    # custom
    kind: str = "coupled"
    control_lo: float = -1.0
    control_hi: float = 1.0
    expressions: Dict[str, str] = field(default_factory=dict)
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in MODEL_NAMES:
            raise ValueError(f"unknown model {self.name!r}; choose from {MODEL_NAMES}")
        if self.kind not in ("coupled", "decoupled"):
            raise ValueError("kind must be 'coupled' or 'decoupled'")
        if self.name == "custom" and not self.expressions:
            raise ValueError("a custom model needs [model.expressions]")

    @property
    def decoupled(self) -> bool:
        return self.name in ("reaction-diffusion", "heat") or (self.name == "custom" and self.kind == "decoupled")

    def build(self):
        if self.name == "lq":
            return lq_model()
        if self.name == "nonlinear":
            return nonlinear_model()
        if self.name == "reaction-diffusion":
            return reaction_diffusion_model(self.gamma_exp, self.v_max, self.f_sign, self.g_sign)
        if self.name == "heat":
            return heat_model(self.terminal)
        cls = DecoupledCoefficientSet if self.kind == "decoupled" else CoefficientSet
        return cls.from_expressions(self.expressions, ControlSet(self.control_lo, self.control_hi),
                                    params=self.params, name="custom")


@dataclass(frozen=True)
class GridSpec:
    T: float = 1.0
    n_steps: int = 50

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


@dataclass(frozen=True)
class EnsembleSpec:
    seed: int
    n_outer: int = 8
    n_inner: int = 2000

    def __post_init__(self):
        if not 0 <= self.seed < MAX_SEED:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.n_outer < 1 or self.n_inner < 1:
            raise ValueError("n_outer and n_inner must be >= 1")


@dataclass(frozen=True)
class ControlSpec:
    """Constant ``value`` unless ``values`` (one per step) is given."""

    value: float = 0.0
    values: List[float] = field(default_factory=list)
    direction: float = 1.0

    def resolve(self, n_steps: int):
        if self.values:
            if len(self.values) != n_steps:
                raise ValueError(f"control.values needs {n_steps} entries, got {len(self.values)}")
            return list(self.values)
        return self.value


@dataclass(frozen=True)
class FieldSpec:
    times: List[float] = field(default_factory=lambda: [0.0, 0.5])
    x_min: float = -1.0
    x_max: float = 1.0
    n_points: int = 5


@dataclass(frozen=True)
class BenchmarkSpec:
    """``u0`` starts the LQ optimizer; ``x`` and ``control`` fix the reaction-diffusion example."""

    u0: float = 0.5
    oversample: int = 4
    x: float = 1.0
    control: float = 0.5
    n_v_grid: int = 201
    mc_samples: int = 100_000


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    write_paths: bool = False


@dataclass(frozen=True)
class RunConfig:
    ensemble: EnsembleSpec
    model: ModelSpec = ModelSpec()
    grid: GridSpec = GridSpec()
    solver: SolverConfig = SolverConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    control: ControlSpec = ControlSpec()
    field: FieldSpec = FieldSpec()
    sampler: SamplerConfig = SamplerConfig()
    benchmark: BenchmarkSpec = BenchmarkSpec()
    output: OutputSpec = OutputSpec()

    @property
    def seed(self) -> int:
        return self.ensemble.seed

    def with_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None,
                       out: Optional[str] = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, ensemble=dataclasses.replace(cfg.ensemble, seed=seed))
        if threads is not None:
            cfg = dataclasses.replace(cfg, solver=dataclasses.replace(cfg.solver, threads=threads))
        if out is not None:
            cfg = dataclasses.replace(cfg, output=dataclasses.replace(cfg.output, dir=str(out)))
        return cfg

    def to_dict(self) -> dict:
        return {f.name: _section_dict(getattr(self, f.name)) for f in dataclasses.fields(self)}


REQUIRED = ("ensemble",)
_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _section_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = dict(v) if isinstance(v, dict) else list(v) if isinstance(v, (list, tuple)) else v
    return out


def _find_line(text: str, section: Optional[str], key: str) -> Optional[int]:
    """Line of ``key`` inside ``[section]`` (top level when ``None``)."""
    current = None
    pat = re.compile(rf"""^\s*(?:{re.escape(key)}|"{re.escape(key)}"|'{re.escape(key)}')\s*=""")
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"^\s*\[\s*([^\]]+?)\s*\]", line)
        if m:
            current = m.group(1)
            if section is None and current == key:
                return n
            continue
        if current == section and pat.match(line):
            return n
    return None


def _check_type(value, tp, key, line):
    origin = typing.get_origin(tp)
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif tp is str:
        ok = isinstance(value, str)
    elif origin in (list, List):
        (inner,) = typing.get_args(tp)
        ok = isinstance(value, list)
        if ok:
            value = [_check_type(v, inner, f"{key}[{i}]", line) for i, v in enumerate(value)]
    elif origin in (dict, Dict):
        _, inner = typing.get_args(tp)
        ok = isinstance(value, dict)
        if ok:
            value = {str(k): _check_type(v, inner, f"{key}.{k}", _find_line_cache.get((key, k), line))
                     for k, v in value.items()}
    else:
        raise TypeError(f"unsupported field type {tp}")
    if not ok:
        name = getattr(tp, "__name__", str(tp))
        raise ConfigError(f"expected {name}, got {type(value).__name__} {value!r}", key, line)
    return value


_find_line_cache: Dict[Tuple[str, str], int] = {}


def _build_section(name: str, cls, table: dict, text: str):
    if not isinstance(table, dict):
        raise ConfigError("expected a table", name, _find_line(text, None, name))
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        dotted = f"{name}.{key}"
        line = _find_line(text, name, key)
        if key not in names:
            # nested tables such as [model.expressions] are reported by their header line
            line = line or _find_line(text, None, dotted)
            raise ConfigError("unknown key", dotted, line)
        if isinstance(value, dict):
            for k in value:
                _find_line_cache[(dotted, k)] = _find_line(text, dotted, k) or line
        kwargs[key] = _check_type(value, hints[key], dotted, line or _find_line(text, None, dotted))
    try:
        return cls(**kwargs)
    except TypeError as exc:
        missing = [f.name for f in dataclasses.fields(cls)
                   if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
                   and f.name not in kwargs]
        if missing:
            raise ConfigError("missing required key", f"{name}.{missing[0]}",
                              _find_line(text, None, name)) from None
        raise ConfigError(str(exc), name, _find_line(text, None, name)) from None
    except ValueError as exc:
        raise ConfigError(str(exc), name, _find_line(text, None, name)) from None


def parse_config(text: str) -> RunConfig:
    """Parse and validate configuration text.

    >>> parse_config("[ensemble]\\nseed = 7\\n").solver.degree
    2
    """
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    _find_line_cache.clear()
    for key in raw:
        if key not in _SECTIONS:
            line = _find_line(text, None, key)
            raise ConfigError("unknown section" if isinstance(raw[key], dict) else "unknown key", key, line)
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing required section [{key}]", key)
    hints = typing.get_type_hints(RunConfig)
    sections = {name: _build_section(name, hints[name], raw[name], text) for name in raw}
    return RunConfig(**sections)


def serialize_config(cfg: RunConfig) -> str:
    """Full TOML text for ``cfg``, defaults included."""
    return tomli_w.dumps(cfg.to_dict())


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
