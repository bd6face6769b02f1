"""Command-line entry point.

    fbdsde <command> --config run.toml [--out DIR] [--threads N] [--seed S]

Commands: simulate, solve, adjoint, verify-mp, optimize, field,
benchmark {lq, reaction-diffusion}, check-assumptions. Every command writes
``report.json`` plus plot-ready CSV files into the output directory and exits
with status 0 exactly when every graded stage passed. Configuration errors
exit with status 2 before any computation.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .config import ConfigError, RunConfig, load_config, serialize_config
from .maximum_principle import (ControlProblem, HamiltonianContext, OptimizationError, check_sufficiency,
                                hv_residual, optimize_control)
from .model import DecoupledCoefficientSet, check_derivative_consistency, check_monotonicity
from .paths import TimeGrid, atomic_write, generate_nested_ensemble
from .solver import as_control, cost_functional, solve_coupled, solve_decoupled, write_json
from .spde import (BenchmarkConfig, SpaceGrid, Stage, evaluate_field, lq_benchmark,
                   reaction_diffusion_benchmark)
from .variation import as_quadruple, duality_check, solve_adjoint, solve_variational

__all__ = ["RunReport", "run", "main", "COMMANDS"]

COMMANDS = ("simulate", "solve", "adjoint", "verify-mp", "optimize", "field", "benchmark", "check-assumptions")
BENCHMARKS = ("lq", "reaction-diffusion")


@dataclass
class RunReport:
    command: str
    config: dict
    seed: int
    stages: List[Stage] = field(default_factory=list)
    wall_time: float = 0.0
    artifacts: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(s.passed is not False for s in self.stages)

    def to_json(self) -> dict:
        return {"schema_version": 1, "command": self.command, "seed": self.seed, "pass": self.passed,
                "wall_time": self.wall_time, "config": self.config, "artifacts": sorted(self.artifacts),
                "stages": [s.to_json() for s in self.stages]}


class _Run:
    """Shared state of one command: config, ensemble, model, output directory."""

    def __init__(self, command: str, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.output.dir)
        self.report = RunReport(command, cfg.to_dict(), cfg.seed)
        self.grid = TimeGrid(0.0, cfg.grid.T, cfg.grid.n_steps)
        self.model = cfg.model.build()
        self.decoupled = isinstance(self.model, DecoupledCoefficientSet)
        self.cs = self.model.as_coupled() if self.decoupled else self.model
        self._ens = None

    @property
    def ens(self):
        if self._ens is None:
            e = self.cfg.ensemble
            self._ens = generate_nested_ensemble(self.grid, e.n_outer, e.n_inner, e.seed,
                                                 threads=self.cfg.solver.threads)
        return self._ens

    @property
    def control(self):
        return as_control(self.cfg.control.resolve(self.grid.n_steps), self.grid, self.model.control_set)

    def stage(self, name: str, metric: str, fn: Callable[[], Stage]) -> Stage:
        try:
            st = fn()
        except Exception as exc:  # a failed stage is reported, not raised
            st = Stage(name, False, metric, None, note=f"{type(exc).__name__}: {exc}")
        st.stage, st.metric = name, metric
        self.report.stages.append(st)
        return st

    def write(self, name: str, text: str) -> None:
        atomic_write(self.out / name, text)
        self.report.artifacts.append(name)

    def solve_state(self, u):
        if self.decoupled:
            return as_quadruple(solve_decoupled(self.model, self.cfg.model.x0, u, self.ens, self.cfg.solver))
        return solve_coupled(self.cs, self.cfg.model.x0, u, self.ens, self.cfg.solver)


def _means_csv(names, arrays, times, n_outer: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "step", "t"] + list(names))
    means = [a.reshape(n_outer, -1, a.shape[-1]).mean(axis=1) for a in arrays]
    for s in range(n_outer):
        for i, t in enumerate(times):
            w.writerow([s, i, repr(float(t))] + [repr(float(m[s, i])) for m in means])
    return buf.getvalue()


def _control_csv(times, u) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "t", "u"])
    for i, (t, v) in enumerate(zip(times, u)):
        w.writerow([i, repr(float(t)), repr(float(v))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands

def _simulate(r: _Run) -> None:
    ens, T = r.ens, r.grid.T

    def moments():
        WT = ens.W[:, -1]
        # sample variance of W(T) against T, 5 standard errors of the variance estimator
        var, se = float(WT.var()), T * math.sqrt(2.0 / ens.n_paths)
        return Stage("", abs(var - T) <= 5 * se, "", var - T, 5 * se, se)

    def backward_motion():
        BT = ens.B[::ens.n_inner, -1]
        return Stage("", None, "", float(BT.var()) - T, None, T * math.sqrt(2.0 / max(len(BT), 1)),
                     note="one B path per scenario; informational")

    r.stage("w_terminal_variance", "sample Var W(T) minus T", moments)
    r.stage("b_terminal_variance", "sample Var B(T) minus T across scenarios", backward_motion)
    if r.cfg.output.write_paths:
        ens.to_csv(r.out / "increments.csv")
        r.report.artifacts.append("increments.csv")
    W, B = ens.W, ens.B
    r.write("path_means.csv", _means_csv(("W", "B", "W2"), (W, B, W ** 2), r.grid.times, ens.n_outer))


def _solve(r: _Run):
    res = {}

    def state():
        u = r.control
        res["state"] = s = r.solve_state(u)
        J, se = cost_functional(r.cs, s)
        res["J"] = (J, se)
        return Stage("", True, "", s.picard_residual, r.cfg.solver.picard_tol,
                     note=f"picard_iterations={s.picard_iterations}")

    def cost():
        J, se = res["J"]
        return Stage("", math.isfinite(J), "", J, None, se)

    r.stage("state_solve", "final Picard residual", state)
    r.stage("cost", "J(u)", cost)
    if "state" in res:
        s = res["state"]
        r.write("state_means.csv", _means_csv(("y", "Y", "z", "Z"), s.arrays(), r.grid.times, r.ens.n_outer))
        if r.cfg.output.write_paths:
            s.to_csv(r.out / "state_paths.csv", r.ens.n_inner)
            r.report.artifacts.append("state_paths.csv")
    return res


def _adjoint(r: _Run):
    res = _solve(r)
    if "state" not in res:
        return res

    def adjoint():
        res["adjoint"] = a = solve_adjoint(r.cs, res["state"], r.ens, r.cfg.solver)
        return Stage("", True, "", a.m2_norm(), None, note=f"picard_iterations={a.picard_iterations}")

    def duality():
        direction = np.full(r.grid.n_steps, r.cfg.control.direction)
        var = solve_variational(r.cs, res["state"], direction, r.ens, r.cfg.solver)
        d = duality_check(r.cs, res["state"], var, res["adjoint"])
        return Stage("", d.passed, "", d.difference, 3 * d.se, d.se, note=f"lhs={d.lhs!r} rhs={d.rhs!r}")

    r.stage("adjoint_solve", "M2 norm of (p, q, k, h)", adjoint)
    r.stage("duality", "duality identity: left minus right", duality)
    if "adjoint" in res:
        r.write("adjoint_means.csv", _means_csv(("p", "q", "k", "h"), res["adjoint"].arrays(), r.grid.times,
                                                r.ens.n_outer))
    return res


def _mp_stages(r: _Run, state, adjoint, prefix: str = "") -> None:
    # both conditions are graded at optimizer.mp_tol, so an approximate optimizer output can pass
    ctx = HamiltonianContext(r.cs, state, adjoint)
    tol = r.cfg.optimizer.mp_tol

    def necessary():
        rep = hv_residual(ctx, n_probe=41, tol=tol)
        hv = "\n".join(f"{i},{m!r},{s!r},{x!r}" for i, (m, s, x)
                       in enumerate(zip(rep.mean_hv, rep.hv_se, rep.mean_residual)))
        r.write(f"{prefix}mp_residual.csv", "step,mean_hv,hv_standard_error,residual\n" + hv + "\n")
        return Stage("", not rep.violation, "", rep.min_residual, -tol,
                     float(rep.hv_se[int(np.argmin(rep.mean_residual))]))

    def sufficiency():
        rep = check_sufficiency(ctx, r.cfg.sampler, tol=tol, solver_cfg=r.cfg.solver)
        note = (f"convexity={rep.convexity_in_state_and_control} gamma_convex={rep.gamma_convex} "
                f"phi_convex={rep.phi_convex} minimization_holds={rep.minimization_holds}")
        return Stage("", rep.passed, "", rep.minimization_gap, None, rep.minimization_gap_se, note=note)

    r.stage(f"{prefix}mp_residual", "worst per-step min over U of E[H_v](v - u)", necessary)
    r.stage(f"{prefix}sufficiency", "mean gap E[H(u)] - min_v E[H(v)]", sufficiency)


def _verify_mp(r: _Run) -> None:
    res = _adjoint(r)
    if "adjoint" in res:
        _mp_stages(r, res["state"], res["adjoint"])


def _optimize(r: _Run) -> None:
    res = {}

    def optimize():
        prob = ControlProblem(r.cs, r.cfg.model.x0, r.ens, r.cfg.solver)
        try:
            res["opt"] = o = optimize_control(prob, r.control, r.cfg.optimizer)
        except OptimizationError as exc:
            if exc.trace.iteration:
                r.write("optimizer_trace.csv", exc.trace.to_csv_text())
            raise
        tr = o.trace
        return Stage("", tr.converged and tr.monotone, "", tr.grad_norm[-1], r.cfg.optimizer.grad_tol,
                     note=f"iterations={tr.iteration[-1]} J0={tr.J[0]!r} J={tr.J[-1]!r} monotone={tr.monotone}")

    def cost():
        tr = res["opt"].trace
        return Stage("", tr.J[-1] <= tr.J[0], "", tr.J[-1], None, tr.se[-1])

    r.stage("optimizer", "final projected-gradient norm", optimize)
    r.stage("final_cost", "J at the optimizer output", cost)
    if "opt" in res:
        o = res["opt"]
        r.write("optimizer_trace.csv", o.trace.to_csv_text())
        r.write("control.csv", _control_csv(r.grid.times[:-1], o.control))
        _mp_stages(r, o.state, o.adjoint)


def _field(r: _Run) -> None:
    if not r.decoupled:
        raise ConfigError("the field command needs a decoupled model (reaction-diffusion, heat, "
                          "or custom with kind = \"decoupled\")", "model.name")
    fc = r.cfg.field
    res = {}

    def evaluate():
        xs = SpaceGrid(fc.x_min, fc.x_max, fc.n_points)
        res["f"] = f = evaluate_field(r.model, r.control, fc.times, xs, r.ens, r.cfg.solver)
        se = f.se()
        worst = float(np.nanmax(se)) if np.isfinite(se).any() else float("nan")
        return Stage("", not f.failed.any(), "", int(f.failed.sum()), 0, worst,
                     note="; ".join(f"{k}: {v}" for k, v in f.errors.items()))

    r.stage("field", "grid points where the solver failed", evaluate)
    if "f" in res:
        r.write("field.csv", res["f"].to_csv_text())


def _check_assumptions(r: _Run) -> None:
    sc = r.cfg.sampler

    def derivatives():
        rep = check_derivative_consistency(r.model, sc)
        worst = max(rep.max_errors.values(), default=0.0)
        return Stage("", rep.passed, "", worst, rep.tolerance, note=", ".join(sorted(rep.failures)))

    def monotonicity():
        rep = check_monotonicity(r.cs, sc)
        ok = rep.direction_of_monotonicity != "neither" and bool(rep.h_monotone)
        return Stage("", None, "", rep.monotonicity_estimate, None,
                     note=(f"direction={rep.direction_of_monotonicity} weak={rep.weakly_monotone} "
                           f"h_monotone={rep.h_monotone} lipschitz={rep.lipschitz_estimate!r} "
                           f"satisfied={ok}; sampled, not proven"))

    r.stage("derivative_consistency", "max relative partial-derivative error", derivatives)
    r.stage("monotonicity", "sampled monotonicity constant", monotonicity)


def _benchmark(r: _Run, which: str) -> None:
    c = r.cfg
    bc = BenchmarkConfig(seed=c.seed, T=c.grid.T, n_steps=c.grid.n_steps, n_outer=c.ensemble.n_outer,
                         n_inner=c.ensemble.n_inner, solver=c.solver, optimizer=c.optimizer, u0=c.benchmark.u0,
                         oversample=c.benchmark.oversample, x=c.benchmark.x, control=c.benchmark.control,
                         gamma_exp=c.model.gamma_exp, v_max=c.model.v_max, f_sign=c.model.f_sign,
                         g_sign=c.model.g_sign, n_v_grid=c.benchmark.n_v_grid, mc_samples=c.benchmark.mc_samples)
    fn = lq_benchmark if which == "lq" else reaction_diffusion_benchmark
    rep = fn(bc, r.out)
    r.report.stages.extend(rep.stages)
    r.report.artifacts.extend(sorted(p.name for p in r.out.glob("*.csv")))
    write_json(r.out / "benchmark.json", rep.to_json())
    r.report.artifacts.append("benchmark.json")


def run(command: str, cfg: RunConfig, benchmark: Optional[str] = None) -> RunReport:
    """Run one command and write ``report.json`` (also when stages fail)."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    if command == "benchmark" and benchmark not in BENCHMARKS:
        raise ValueError(f"benchmark must be one of {BENCHMARKS}")
    start = time.perf_counter()
    r = _Run(command if benchmark is None else f"benchmark {benchmark}", cfg)
    r.out.mkdir(parents=True, exist_ok=True)
    try:
        if command == "benchmark":
            _benchmark(r, benchmark)
        else:
            {"simulate": _simulate, "solve": _solve, "adjoint": _adjoint, "verify-mp": _verify_mp,
             "optimize": _optimize, "field": _field, "check-assumptions": _check_assumptions}[command](r)
    except ConfigError:
        raise
    except Exception as exc:  # keep the report even if a command dies between stages
        r.report.stages.append(Stage("command", False, "uncaught error", None, note=f"{type(exc).__name__}: {exc}"))
    r.report.wall_time = time.perf_counter() - start
    write_json(r.out / "report.json", r.report.to_json())
    atomic_write(r.out / "config.toml", serialize_config(cfg))
    return r.report


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbdsde", description="Controlled forward-backward doubly stochastic "
                                                            "systems: solvers, diagnostics and benchmarks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="TOML run configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides output.dir)")
    common.add_argument("--threads", type=_positive, help="worker threads; results do not depend on it")
    common.add_argument("--seed", type=_u64, help="override ensemble.seed")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {"simulate": "generate the Brownian ensemble", "solve": "solve the state system at the control",
             "adjoint": "state, adjoint and the duality identity", "verify-mp": "maximum-principle residuals",
             "optimize": "projected-gradient optimization", "field": "random field u(t, x)",
             "check-assumptions": "sampled Lipschitz, monotonicity and derivative checks"}
    for name, h in helps.items():
        sub.add_parser(name, parents=[common], help=h)
    b = sub.add_parser("benchmark", parents=[common], help="worked examples with known answers")
    b.add_argument("which", choices=BENCHMARKS)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.threads, args.out)
        report = run(args.command, cfg, getattr(args, "which", None))
    except (ConfigError, OSError) as exc:
        print(f"fbdsde: configuration error: {exc}", file=sys.stderr)
        return 2
    for s in report.stages:
        flag = {True: "PASS", False: "FAIL", None: "INFO"}[s.passed]
        print(f"{flag:4s} {s.stage}: {s.metric} = {s.value!r}" + (f" (se {s.se:.3g})" if s.se else ""))
    print(f"{'PASS' if report.passed else 'FAIL'} {report.command} -> {cfg.output.dir}/report.json "
          f"({report.wall_time:.1f} s)")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
