"""Experiment orchestration: config parsing, suites, artifact emission.

A config JSON fixes one fixture (space, energy, initial point, solver
parameters) plus a list of identity suites to run.  Every suite writes a
``report_<name>.json`` with the schema

    {"identity": ..., "max_residual": ..., "tolerance": ..., "pass": ...,
     "residuals_file": ...}

and its residual vector as CSV.  ``manifest.json`` at the output root echoes
the config, records wall times and the pass/fail summary.  Exit codes:
0 all selected suites pass, 2 at least one suite failed, 1 execution or
validation error.  Progress goes to stderr; data only to files and stdout.
"""

from __future__ import annotations

import argparse
import datetime
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .energies import EnergySpec, energy_eval, eval_many
from .errors import WedflowError
from .reference import (
    StudyOptions, convergence_study, lambda_diagnostics, minimizing_movements,
)
from .spaces import EUCLIDEAN, Point, SpaceSpec, distance
from .trajectories import poincare_witness, spectral_check
from .value import (
    IdentityReport, ProbeOptions, ValueCache, ValueOptions, check_dpp,
    check_eps_monotonicity, check_fundamental_identity, check_hj,
    check_yosida_bound, finsler_distance, value_along, value_function,
)
from .wed import WedProblem, check_inner_variation, default_horizon, minimize_wed

SUITES = ("spectral", "inner", "dpp", "fundamental", "monotone", "yosida",
          "hj", "lambda", "convergence", "finsler")


class ConfigError(WedflowError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"config {pointer}: {message}")
        self.pointer = pointer


def _need(cfg: dict, key: str, typ, pointer: str):
    if key not in cfg:
        raise ConfigError(f"{pointer}/{key}", "missing required key")
    val = cfg[key]
    if typ is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, typ):
        raise ConfigError(f"{pointer}/{key}", f"expected {typ.__name__}")
    return val


class Experiment:
    """Validated config plus lazily computed shared objects."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        try:
            self.space = SpaceSpec.from_json(_need(cfg, "space", dict, ""))
        except WedflowError as exc:
            raise ConfigError("/space", str(exc))
        try:
            self.energy = EnergySpec.from_json(_need(cfg, "energy", dict, ""))
        except WedflowError as exc:
            raise ConfigError("/energy", str(exc))
        try:
            self.x_bar = Point(np.asarray(_need(cfg, "x_bar", list, ""), float), self.space)
        except WedflowError as exc:
            raise ConfigError("/x_bar", str(exc))
        self.epsilon = float(_need(cfg, "epsilon", (int, float), ""))
        if self.epsilon <= 0.0:
            raise ConfigError("/epsilon", "must be positive")
        eps_list = cfg.get("eps_list")
        if eps_list is not None:
            if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
                raise ConfigError("/eps_list", "must decrease strictly")
            self.eps_list = [float(e) for e in eps_list]
        else:
            self.eps_list = [self.epsilon, self.epsilon / 2.0, self.epsilon / 4.0]
        self.N = int(cfg.get("N", 4000))
        self.T = cfg.get("T")
        self.t_obs = float(cfg.get("t_obs", self.T if self.T is not None else 1.0))
        self.grid_mode = cfg.get("grid_mode", "uniform")
        self.solver = cfg.get("solver", "direct")
        self.grad_tol = float(cfg.get("grad_tol", 1e-8))
        self.max_iter = int(cfg.get("max_iter", 100))
        self.probe_seed = int(cfg.get("probe_seed", 20240))
        self.cache = ValueCache(int(cfg.get("cache_capacity", 256)))
        self._solution = None

    def problem(self, epsilon=None, T=None) -> WedProblem:
        eps = self.epsilon if epsilon is None else epsilon
        horizon = T if T is not None else (
            float(self.T) if self.T is not None else default_horizon(eps, self.t_obs)
        )
        try:
            return WedProblem(
                epsilon=eps, T=horizon, N=self.N, space=self.space, energy=self.energy,
                x_bar=self.x_bar, grid_mode=self.grid_mode, solver=self.solver,
                grad_tol=self.grad_tol, max_iter=self.max_iter,
            )
        except WedflowError as exc:
            raise ConfigError("/epsilon", str(exc))

    def solution(self):
        if self._solution is None:
            self._solution = minimize_wed(self.problem())
        return self._solution

    def value_opts(self) -> ValueOptions:
        return ValueOptions(cache=self.cache, grad_tol=self.grad_tol,
                            max_iter=self.max_iter)


# -- emission helpers ---------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def write_residuals_csv(path: Path, residuals) -> None:
    with open(path, "w") as fh:
        fh.write("index,residual\n")
        for i, r in enumerate(np.asarray(residuals, dtype=float)):
            fh.write(f"{i},{_fmt(r)}\n")


def write_report(outdir: Path, report: IdentityReport) -> dict:
    resid_file = outdir / f"residuals_{report.name}.csv"
    write_residuals_csv(resid_file, report.residuals)
    payload = {
        "identity": report.name,
        "max_residual": report.max_residual,
        "tolerance": report.tolerance,
        "pass": report.passed,
        "residuals_file": resid_file.name,
        "details": _jsonable(report.details),
    }
    with open(outdir / f"report_{report.name}.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return payload


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def write_trajectory_csv(path: Path, sol, V=None, resid_fund=None, resid_inner=None) -> None:
    """One row per node; per-cell quantities (speed, residuals) at the cell's
    left node, blank on the final row."""
    pts = sol.trajectory.points
    nodes = sol.trajectory.grid.nodes
    d = pts.shape[1]
    V = value_along(sol) if V is None else V
    with open(path, "w") as fh:
        cols = ["t"] + [f"x{j}" for j in range(d)] + ["speed", "phi", "V",
                                                      "resid_fund", "resid_inner"]
        fh.write(",".join(cols) + "\n")
        n_cell = len(nodes) - 1
        for i, t in enumerate(nodes):
            row = [_fmt(t)] + [_fmt(c) for c in pts[i]]
            row.append(_fmt(sol.speed[i]) if i < n_cell else "")
            row.append(_fmt(sol.phi[i]))
            row.append(_fmt(V[i]))
            row.append(_fmt(resid_fund[i]) if resid_fund is not None and i < len(resid_fund) else "")
            row.append(_fmt(resid_inner[i]) if resid_inner is not None and i < len(resid_inner) else "")
            fh.write(",".join(row) + "\n")


# -- suites --------------------------------------------------------------------


def suite_spectral(exp: Experiment, outdir: Path) -> IdentityReport:
    rng = np.random.default_rng(exp.probe_seed)
    violations = []
    for eps in (0.1, 1.0):
        for _ in range(500):
            n = int(rng.integers(8, 64))
            t = np.concatenate([[0.0], np.cumsum(rng.uniform(0.01, 0.5, n))])
            w = np.concatenate([[0.0], rng.standard_normal(n)])
            lhs, rhs, _ = spectral_check(t, w, eps)
            violations.append(max(0.0, rhs - lhs) / max(lhs, 1e-300))
    n_w, eps_w = 50.0, 1.0
    t = np.linspace(0.0, 4 * n_w, 100_000 + 1)
    _, _, ratio = spectral_check(t, poincare_witness(n_w, eps_w, t), eps_w)
    resid = np.asarray(violations + [max(0.0, 0.9 - ratio)])
    return IdentityReport(
        name="spectral", residuals=resid, max_residual=float(np.max(resid)),
        tolerance=1e-12, details={"witness_ratio": ratio},
    )


def suite_inner(exp: Experiment, outdir: Path) -> IdentityReport:
    sol = exp.solution()
    rep = check_inner_variation(sol)
    scale = max(rep.speed_scale, 1e-12)
    resid = np.append(rep.residuals / scale, rep.boundary_residual / max(abs(sol.objective), 1e-9))
    return IdentityReport(
        name="inner", residuals=resid, max_residual=float(np.max(resid)),
        tolerance=5e-2,
        details={"boundary_residual": rep.boundary_residual, "speed_scale": rep.speed_scale},
    )


def suite_dpp(exp: Experiment, outdir: Path) -> IdentityReport:
    eps = exp.epsilon
    horizons = exp.cfg.get("horizons", [eps, 2 * eps, 5 * eps])
    return check_dpp(exp.solution(), horizons, exp.value_opts())


def suite_fundamental(exp: Experiment, outdir: Path) -> IdentityReport:
    return check_fundamental_identity(exp.solution())


def suite_monotone(exp: Experiment, outdir: Path) -> IdentityReport:
    if exp.space.dim != 1:
        return check_eps_monotonicity(exp.energy, exp.x_bar, exp.eps_list, exp.value_opts())
    xs = np.linspace(exp.x_bar.coords[0] - 1.0, exp.x_bar.coords[0] + 1.0, 20)
    worst = None
    for xv in xs:
        rep = check_eps_monotonicity(
            exp.energy, Point(np.array([xv]), exp.space), exp.eps_list, exp.value_opts()
        )
        if worst is None or rep.max_residual > worst.max_residual:
            worst = rep
    return worst


def suite_yosida(exp: Experiment, outdir: Path) -> IdentityReport:
    return check_yosida_bound(exp.energy, exp.x_bar, exp.epsilon, opts=exp.value_opts())


def suite_hj(exp: Experiment, outdir: Path) -> IdentityReport:
    probe = ProbeOptions(seed=exp.probe_seed)
    return check_hj(exp.energy, exp.x_bar, exp.epsilon, probe, exp.value_opts())


def suite_lambda(exp: Experiment, outdir: Path) -> IdentityReport:
    lam = exp.energy.lam
    if lam is None:
        raise ConfigError("/energy/lambda", "lambda suite needs a convexity modulus")
    lam_prime = exp.cfg.get("lambda_prime", lam - 0.25 if lam < 0 else None)
    return lambda_diagnostics(exp.solution(), lam, lam_prime)


def suite_convergence(exp: Experiment, outdir: Path) -> IdentityReport:
    opts = StudyOptions(N=exp.N, grad_tol=exp.grad_tol, max_iter=exp.max_iter)
    table = convergence_study(exp.energy, exp.x_bar, exp.eps_list, exp.t_obs, opts)
    with open(outdir / "convergence.csv", "w") as fh:
        fh.write("epsilon,sup_err,lsc_residual,runtime_s\n")
        for r in table.rows:
            fh.write(f"{_fmt(r.epsilon)},{_fmt(r.sup_err)},{_fmt(r.lsc_residual)},"
                     f"{_fmt(r.runtime_s)}\n")
    errs = table.sup_errors
    resid = [max(0.0, errs[i + 1] - 1.1 * errs[i]) for i in range(len(errs) - 1)]
    resid.append(max(0.0, table.rows[-1].lsc_residual - 5e-2))
    if exp.energy.kind == "quadratic" and exp.space.kind == EUCLIDEAN:
        # first-order rate is a sharp claim only when the reference flow has
        # no discretization floor of its own (closed form in the same space)
        for i in range(len(errs) - 1):
            ratio = errs[i] / max(errs[i + 1], 1e-300)
            resid.append(max(0.0, 1.6 - ratio) + max(0.0, ratio - 2.4))
    resid = np.asarray(resid)
    return IdentityReport(
        name="convergence", residuals=resid, max_residual=float(np.max(resid)),
        tolerance=0.0,
        details={"sup_err": errs.tolist(),
                 "lsc": [r.lsc_residual for r in table.rows]},
    )


def suite_finsler(exp: Experiment, outdir: Path) -> IdentityReport:
    space = SpaceSpec.euclidean(exp.space.dim if exp.space.kind == EUCLIDEAN else 1)
    a = Point(np.zeros(space.dim), space)
    b_coords = np.zeros(space.dim)
    b_coords[0] = 1.5
    b = Point(b_coords, space)
    d_plain = finsler_distance(space, lambda p: 1.0, a, b)
    resid = [abs(d_plain - distance(space, a, b)) / 1e-6]
    s1 = SpaceSpec.euclidean(1)
    c_val = 4.0
    da = Point(np.array([0.0]), s1)
    db = Point(np.array([2.0]), s1)
    d_const = finsler_distance(s1, lambda p: math.sqrt(c_val), da, db)
    resid.append(abs(d_const - math.sqrt(c_val) * 2.0) / 1e-4)
    if exp.space.dim == 1 and exp.space.kind == EUCLIDEAN:
        f_phi = lambda p: math.sqrt(max(1.0, energy_eval(exp.energy, p)))
    else:
        f_phi = lambda p: math.sqrt(max(1.0, float(p.coords[0]) ** 2))
    val, curve = finsler_distance(s1, f_phi, da, db, return_curve=True)
    from .trajectories import g_reparam, metric_speed as _speed

    rep_curve = g_reparam(curve, f_phi)
    v = _speed(rep_curve)
    mids = 0.5 * (rep_curve.points[:-1] + rep_curve.points[1:])
    fvals = np.array([f_phi(Point(m, s1)) for m in mids])
    product = float(np.sum(fvals * v * rep_curve.grid.dt))
    resid.append(abs(product - val) / max(val, 1e-9) / 1e-3)
    resid = np.asarray(resid)
    return IdentityReport(
        name="finsler", residuals=resid, max_residual=float(np.max(resid)),
        tolerance=1.0,
        details={"plain": d_plain, "const": d_const, "lagrangian": val, "product": product},
    )


_SUITE_FN = {
    "spectral": suite_spectral, "inner": suite_inner, "dpp": suite_dpp,
    "fundamental": suite_fundamental, "monotone": suite_monotone,
    "yosida": suite_yosida, "hj": suite_hj, "lambda": suite_lambda,
    "convergence": suite_convergence, "finsler": suite_finsler,
}


# -- tasks beyond suites ---------------------------------------------------------


def emit_solve(exp: Experiment, outdir: Path) -> dict:
    sol = exp.solution()
    fund = check_fundamental_identity(sol)
    inner = check_inner_variation(sol)
    n_rate = sol.speed.shape[0]
    write_trajectory_csv(outdir / "trajectory.csv", sol,
                         resid_fund=fund.residuals[:n_rate],
                         resid_inner=inner.residuals)
    payload = {
        "objective": sol.objective,
        "iterations": sol.iterations,
        "gradient_norm": sol.gradient_norm,
        "converged": sol.converged,
        "residuals": {
            "inner_variation": inner.max_residual,
            "fundamental": fund.max_residual,
        },
    }
    with open(outdir / "report.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return payload


def emit_value(exp: Experiment, outdir: Path, xs=None) -> None:
    xs = [exp.x_bar] if xs is None else xs
    with open(outdir / "value.csv", "w") as fh:
        d = exp.space.dim
        fh.write(",".join([f"x{j}" for j in range(d)] + ["epsilon", "V", "G", "phi"]) + "\n")
        for x in xs:
            for eps in exp.eps_list:
                s = value_function(exp.energy, x, eps, exp.value_opts())
                row = [_fmt(c) for c in x.coords] + [_fmt(eps), _fmt(s.V), _fmt(s.G), _fmt(s.phi)]
                fh.write(",".join(row) + "\n")


def emit_sweep(exp: Experiment, outdir: Path) -> None:
    if exp.space.dim != 1:
        raise ConfigError("/space", "sweep currently expects a one-dimensional space")
    xs = [Point(np.array([xv]), exp.space)
          for xv in np.linspace(exp.x_bar.coords[0] - 1.0, exp.x_bar.coords[0] + 1.0, 20)]
    emit_value(exp, outdir, xs)


def emit_mm(exp: Experiment, outdir: Path) -> None:
    tau = float(exp.cfg.get("mm_tau", exp.epsilon**2 / 4.0))
    steps = int(exp.cfg.get("mm_steps", math.ceil(exp.t_obs / tau)))
    mm = minimizing_movements(exp.x_bar, tau, steps, exp.energy, exp.space)
    phis = eval_many(exp.energy, mm.trajectory.points)
    with open(outdir / "mm.csv", "w") as fh:
        d = exp.space.dim
        fh.write(",".join(["k", "t"] + [f"x{j}" for j in range(d)] + ["phi", "movement"]) + "\n")
        for k, t in enumerate(mm.trajectory.grid.nodes):
            row = [str(k), _fmt(t)] + [_fmt(c) for c in mm.trajectory.points[k]]
            row.append(_fmt(phis[k]))
            row.append(_fmt(mm.movements[k - 1]) if k >= 1 else "")
            fh.write(",".join(row) + "\n")


# -- driver -----------------------------------------------------------------------


def run(cfg: dict, out: Path, jobs: int | None = None, suites=None, quiet=False,
        tasks=()) -> int:
    started = datetime.datetime.now(datetime.timezone.utc)
    t0 = time.perf_counter()
    try:
        exp = Experiment(cfg)
        selected = list(suites) if suites else list(cfg.get("suites", []))
        for s in selected:
            if s not in SUITES:
                raise ConfigError("/suites", f"unknown suite {s!r}")
        out.mkdir(parents=True, exist_ok=True)
        exp.problem()  # fail configs violating well-posedness before any work
    except WedflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    results = {}
    times = {}

    def run_suite(name):
        t = time.perf_counter()
        rep = _SUITE_FN[name](exp, out)
        return name, rep, time.perf_counter() - t

    try:
        for task in tasks:
            t = time.perf_counter()
            if task == "solve":
                emit_solve(exp, out)
            elif task == "value":
                emit_value(exp, out)
            elif task == "sweep":
                emit_sweep(exp, out)
            elif task == "mm":
                emit_mm(exp, out)
            times[task] = time.perf_counter() - t
            if not quiet:
                print(f"task {task}: done in {times[task]:.2f}s", file=sys.stderr)
        if selected:
            workers = jobs or int(cfg.get("jobs", os.cpu_count() or 1))
            with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
                futures = [pool.submit(run_suite, name) for name in selected]
                for fut in futures:  # declaration order, deterministic merge
                    name, rep, dt = fut.result()
                    results[name] = rep
                    times[name] = dt
                    write_report(out, rep)
                    if not quiet:
                        verdict = "pass" if rep.passed else "FAIL"
                        print(f"suite {name}: {verdict} (max residual "
                              f"{rep.max_residual:.3e}, {dt:.2f}s)", file=sys.stderr)
    except WedflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    summary = {name: rep.passed for name, rep in results.items()}
    manifest = {
        "tool": "wedflow",
        "version": __version__,
        "config": _jsonable(cfg),
        "started_utc": started.isoformat(),
        "finished_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "wall_time_s": time.perf_counter() - t0,
        "task_wall_times_s": times,
        "probe_seed": cfg.get("probe_seed", 20240),
        "summary": summary,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0 if all(summary.values()) else 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="wedflow",
                                     description="weighted energy-dissipation experiments")
    parser.add_argument("command", choices=["solve", "value", "sweep", "check",
                                            "mm", "finsler", "all"])
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--jobs", type=int, default=None, help="worker pool size")
    parser.add_argument("--suite", action="append", default=None,
                        help="suite name for 'check' (repeatable)")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1

    out = Path(args.out)
    if args.command == "check":
        suites = args.suite or cfg.get("suites") or list(SUITES)
        return run(cfg, out, args.jobs, suites, args.quiet)
    if args.command == "solve":
        return run(cfg, out, args.jobs, [], args.quiet, tasks=("solve",))
    if args.command == "value":
        return run(cfg, out, args.jobs, [], args.quiet, tasks=("value",))
    if args.command == "sweep":
        return run(cfg, out, args.jobs, [], args.quiet, tasks=("sweep",))
    if args.command == "mm":
        return run(cfg, out, args.jobs, [], args.quiet, tasks=("mm",))
    if args.command == "finsler":
        return run(cfg, out, args.jobs, ["finsler"], args.quiet)
    return run(cfg, out, args.jobs, list(SUITES), args.quiet,
               tasks=("solve", "value", "mm"))


if __name__ == "__main__":
    raise SystemExit(main())
