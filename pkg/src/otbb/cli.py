"""Command-line entry point: otbb {solve, verify, converge, jko, mesh-report}.

Exit codes: 0 success, 2 invalid input, 3 solver did not converge,
4 a verification check failed.
"""

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import fvmodel, trimodel
from .measures import GenericMeasure
from .solver import SolverOptions, solve
from .timedisc import FinalPenalty, assemble, potential_penalty
from .verify import (ASSUMPTIONS, ConvergenceSpec, ModelFamily, assumption_sweep, check_a4,
                     controllability_bound, convergence_experiment, default_jobs,
                     no_flux_battery, sweeps_csv, write_json)

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_VERIFY_FAILED = 0, 2, 3, 4


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------- parsing helpers


def _floats(text):
    try:
        return [float(t) for t in str(text).split(",") if t.strip() != ""]
    except ValueError:
        raise ValidationError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    if isinstance(text, int):
        return [text]
    try:
        return [int(t) for t in str(text).split(",") if t.strip() != ""]
    except ValueError:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from None


def parse_measure(text, dim=1, mesh=None):
    """Mini-language: dirac:x[,y[,z]], uniform:a,b[,c,d...], file:path.json.

    `uniform` takes one (lo, hi) pair per axis; with no numbers on a
    triangulation it is the uniform measure of the whole surface.
    """
    if isinstance(text, dict):
        return GenericMeasure.from_json(text)
    kind, _, rest = str(text).partition(":")
    if kind == "dirac":
        x = _floats(rest)
        if not x:
            raise ValidationError("dirac needs coordinates")
        return GenericMeasure.dirac(np.array(x))
    if kind == "uniform":
        v = _floats(rest)
        if not v:
            if mesh is None:
                raise ValidationError("uniform without bounds needs a triangulation")
            return trimodel.uniform_measure(mesh)
        if len(v) % 2:
            raise ValidationError("uniform needs lo,hi pairs")
        lo, hi = np.array(v[0::2]), np.array(v[1::2])
        if np.any(hi <= lo):
            raise ValidationError("uniform box needs lo < hi on every axis")
        return GenericMeasure.uniform_box(lo, hi)
    if kind == "file":
        if not os.path.exists(rest):
            raise ValidationError(f"measure file {rest!r} not found")
        with open(rest) as fh:
            return GenericMeasure.from_json(json.load(fh))
    raise ValidationError(f"unknown measure syntax {text!r}")


def _domain(args):
    dim = int(args.dim or 1)
    if args.domain is None:
        return [(0.0, 1.0)] * dim
    v = _floats(args.domain)
    if len(v) == 2:
        return [(v[0], v[1])] * dim
    if len(v) != 2 * dim:
        raise ValidationError(f"domain needs 2 or {2 * dim} numbers")
    return [(v[2 * i], v[2 * i + 1]) for i in range(dim)]


def family_from_args(args):
    """Model family; `cells` (fv, flat triangulation) or `subdiv` (sphere) lists the resolutions."""
    if args.model == "fv":
        res = _ints(args.cells or 16)
        return ModelFamily("fv", _domain(args), res[0], args.mean, resolutions=tuple(res))
    if args.model == "tri":
        if args.surface == "sphere":
            res = _ints(args.subdiv if args.subdiv is not None else 3)
            return ModelFamily("sphere", base=res[0], resolutions=tuple(res))
        res = _ints(args.cells or 8)
        args.dim = args.dim or 2
        return ModelFamily("flat-tri", _domain(args), res[0],
                           pattern=args.pattern, resolutions=tuple(res))
    raise ValidationError(f"unknown model {args.model!r}")


def model_from_args(args):
    if args.mesh:
        if not os.path.exists(args.mesh):
            raise ValidationError(f"mesh file {args.mesh!r} not found")
        if args.model == "fv":
            return fvmodel.FVModel(fvmodel.load_mesh(args.mesh), args.mean)
        return trimodel.TriModel(trimodel.load_mesh(args.mesh))
    return family_from_args(args).build(0)


def solver_options(args):
    data = dict(args.solver or {})
    for key in ("tol", "max_iter", "r", "linear_solver"):
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    try:
        return SolverOptions.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


# ---------------------------------------------------------------- output helpers


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fig_path(args, name):
    if args.no_figures:
        return None
    base = args.fig_dir or (os.path.dirname(os.path.abspath(args.out)) if args.out else ".")
    os.makedirs(base, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.out))[0] if args.out else args.command
    return os.path.join(base, f"{stem}_{name}.png")


def _summary_path(args):
    if args.json:
        return args.json
    if args.out:
        return os.path.splitext(args.out)[0] + ".json"
    return None


def _metadata():
    return {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), "argv": sys.argv[1:]}


# ---------------------------------------------------------------- commands


def _path_rows(path):
    rows = []
    for k, Pk in enumerate(path.P):
        rows.extend([k, i, repr(float(v))] for i, v in enumerate(Pk))
    return rows


def cmd_solve(args):
    model = model_from_args(args)
    mesh = getattr(model, "mesh", None)
    rho0 = parse_measure(_need(args, "rho0"), mesh=mesh)
    rho1 = parse_measure(_need(args, "rho1"), mesh=mesh)
    N = _ints(args.N or 16)[0]
    problem = assemble(model, rho0, rho1, N=N)
    path, stats = solve(problem, solver_options(args))
    print(f"objective {stats.objective:.10g}  iterations {stats.iterations}  converged {stats.converged}")
    if args.out:
        _write_csv(args.out, ["k", "node", "density"], _path_rows(path))
    summary = {"objective": stats.objective, "converged": stats.converged,
               "iterations": stats.iterations, "sigma": float(model.sigma), "N": N,
               "metadata": {**_metadata(), "wall_time": stats.wall_time}}
    _emit(args, summary)
    fig = _fig_path(args, "densities")
    if fig:
        from .plotting import plot_densities
        plot_densities(model, path.P, fig, title=f"objective {stats.objective:.5g}")
    return EXIT_OK if stats.converged else EXIT_NOT_CONVERGED


def cmd_converge(args):
    family = family_from_args(args)
    Ns = _ints(args.N or 16)
    levels = list(range(len(family.resolutions)))
    if len(Ns) == 1:
        Ns = Ns * len(levels)
    if len(levels) == 1:
        levels = levels * len(Ns)
    if len(Ns) != len(levels):
        raise ValidationError("N and resolution schedules must have equal length (or length 1)")
    mesh = family.build(0).mesh if family.kind != "fv" else None
    spec = ConvergenceSpec(family, parse_measure(_need(args, "rho0"), mesh=mesh),
                           parse_measure(_need(args, "rho1"), mesh=mesh), list(zip(Ns, levels)),
                           oracle=args.oracle, ground_truth=args.ground_truth,
                           options=solver_options(args).__dict__, name=args.name or "convergence")
    table = convergence_experiment(spec, jobs=args.jobs)
    for r in table.rows:
        print(f"N={r.N:4d} sigma={r.sigma:.6g} objective={r.objective:.8g} rel_error={r.rel_error:.4%}"
              f"{'' if r.converged else '  (not converged)'}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(table.to_csv())
    data = table.to_json()
    data["metadata"].update(_metadata())
    _emit(args, data)
    fig = _fig_path(args, "convergence")
    if fig:
        from .plotting import plot_convergence
        plot_convergence(table, fig)
    return EXIT_OK if all(r.converged for r in table.rows) else EXIT_NOT_CONVERGED


def cmd_verify(args):
    which = args.assumption
    family = family_from_args(args)
    if which == "A4":
        return _verify_a4(args, family)
    # sweeps and refinement checks halve the mesh size from the first resolution
    family = ModelFamily(family.kind, family.domain, family.base, family.mean, family.pattern)
    if which == "controllability":
        d = _floats(args.distances)
        report = controllability_bound(family, d, N=_ints(args.N or 16)[0])
        for k, v in report.checks.items():
            print(f"{k:20s} {'pass' if v else 'FAIL'}")
        print(f"kappa {report.kappa:.6g}  R^2 {report.r_squared:.6f}  "
              f"max step factor {report.max_step_factor:.6g} <= {report.step_bound:.6g}")
        if args.out:
            with open(args.out, "w", newline="") as fh:
                fh.write(report.to_csv())
        _emit(args, {**report.to_json(), "metadata": _metadata()})
        fig = _fig_path(args, "controllability")
        if fig:
            from .plotting import plot_controllability
            plot_controllability(report, fig)
        return EXIT_OK if report.passed else EXIT_VERIFY_FAILED
    names = [a for a in ASSUMPTIONS if a != "A4"] if which == "all" else [which]
    if family.kind == "fv":
        names = [a for a in names if a != "A'5"]
    levels = range(int(args.levels))
    sweeps = [assumption_sweep(family, a, levels, seed=args.seed) for a in names]
    for s in sweeps:
        errs = " ".join(f"{l.error:.3e}" for l in s.levels)
        slope = "n/a" if not np.isfinite(s.slope) else f"{s.slope:.2f}"
        print(f"{s.assumption:4s} {'pass' if s.passed else 'FAIL'}  slope {slope}  errors {errs}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(sweeps_csv(sweeps))
    _emit(args, {"sweeps": [s.to_json() for s in sweeps], "seed": args.seed, "metadata": _metadata()})
    fig = _fig_path(args, "sweeps")
    if fig:
        from .plotting import plot_sweeps
        plot_sweeps(sweeps, fig)
    return EXIT_OK if all(s.passed for s in sweeps) else EXIT_VERIFY_FAILED


def _verify_a4(args, family):
    model = family.build(0)
    if family.kind == "fv":
        fields = no_flux_battery(family.domain)
    elif family.spherical:
        from .verify import _sphere_fields
        fields = [(f, 20) for f in _sphere_fields()]
    else:
        raise ValidationError("A4 check is available on grids and the sphere")
    rows, worst = [], 0.0
    for f, deg in fields:
        r = check_a4(model, f, order=max(9, deg))
        worst = max(worst, r)
        rows.append([f.name, repr(r)])
        print(f"A4 {f.name:8s} residual {r:.3e}")
    passed = worst <= 1e-10
    print(f"A4 {'pass' if passed else 'FAIL'}  max residual {worst:.3e}")
    if args.out:
        _write_csv(args.out, ["field", "residual"], rows)
    _emit(args, {"assumption": "A4", "max_residual": worst, "passed": passed, "metadata": _metadata()})
    return EXIT_OK if passed else EXIT_VERIFY_FAILED


def cmd_jko(args):
    model = model_from_args(args)
    rho0 = parse_measure(_need(args, "rho0"), mesh=getattr(model, "mesh", None))
    N = _ints(args.N or 16)[0]
    a = np.array(_floats(args.target or "1"))
    vol = model.density_weights
    if args.penalty == "potential":
        def V(x):
            x = np.asarray(x, float)
            return np.sum((x[:, :len(a)] - a) ** 2, axis=1)
        penalty = potential_penalty(model, V, scale=args.strength)
    else:
        penalty = FinalPenalty(args.penalty, vol, scale=args.strength)
    problem = assemble(model, rho0, penalty=penalty, N=N)
    path, stats = solve(problem, solver_options(args))
    final = path.P[-1]
    x = model.potential_nodes() if not isinstance(model, fvmodel.FVModel) else model.mesh.centers
    mass = float(np.dot(vol, final))
    bary = (vol * final) @ x / mass
    print(f"objective {stats.objective:.10g}  barycenter {np.array2string(bary, precision=8)}  "
          f"iterations {stats.iterations}  converged {stats.converged}")
    if args.out:
        _write_csv(args.out, ["node", "final_density"], [[i, repr(float(v))] for i, v in enumerate(final)])
    _emit(args, {"objective": stats.objective, "barycenter": bary.tolist(), "mass": mass,
                 "converged": stats.converged, "iterations": stats.iterations,
                 "metadata": {**_metadata(), "wall_time": stats.wall_time}})
    fig = _fig_path(args, "jko")
    if fig:
        from .plotting import plot_densities
        plot_densities(model, path.P, fig, title="JKO step")
    return EXIT_OK if stats.converged else EXIT_NOT_CONVERGED


def cmd_mesh_report(args):
    model = model_from_args(args)
    report = model.geometry_report()
    report = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in report.items()}
    for k, v in report.items():
        print(f"{k:24s} {v}")
    if args.out:
        _write_csv(args.out, ["quantity", "value"], [[k, json.dumps(v)] for k, v in report.items()])
    _emit(args, {**report, "metadata": _metadata()})
    fig = _fig_path(args, "mesh")
    if fig:
        from .plotting import plot_mesh
        plot_mesh(model, fig)
    return EXIT_OK


def _need(args, name):
    v = getattr(args, name)
    if v is None:
        raise ValidationError(f"--{name} is required")
    return v


def _emit(args, data):
    path = _summary_path(args)
    if path:
        write_json(path, data)


# ---------------------------------------------------------------- argument parser


COMMANDS = {"solve": cmd_solve, "verify": cmd_verify, "converge": cmd_converge, "jko": cmd_jko,
            "mesh-report": cmd_mesh_report}


def build_parser():
    parser = argparse.ArgumentParser(prog="otbb", description="Discrete dynamic optimal transport.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--spec", help="JSON experiment spec; command-line flags override it")
        p.add_argument("--model", choices=["fv", "tri"], default=None)
        p.add_argument("--dim", type=int, default=None)
        p.add_argument("--domain", help="lo,hi or lo1,hi1,lo2,hi2")
        p.add_argument("--cells", help="cells per axis (comma list in converge)")
        p.add_argument("--mesh", help="mesh file (.json grid or .off triangulation)")
        p.add_argument("--surface", choices=["sphere", "flat"], default=None)
        p.add_argument("--subdiv", help="icosphere subdivision level(s)")
        p.add_argument("--pattern", default=None)
        p.add_argument("--mean", default=None)
        p.add_argument("--N", help="time steps (comma list in converge)")
        p.add_argument("--rho0")
        p.add_argument("--rho1")
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iter", dest="max_iter", type=int)
        p.add_argument("--r", type=float)
        p.add_argument("--linear-solver", dest="linear_solver", choices=["direct", "cg"])
        p.add_argument("--out", help="CSV output path")
        p.add_argument("--json", help="JSON summary path (default: next to --out)")
        p.add_argument("--fig-dir", dest="fig_dir")
        p.add_argument("--no-figures", dest="no_figures", action="store_true")
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        if name == "verify":
            p.add_argument("--assumption", default=None,
                           choices=list(ASSUMPTIONS) + ["all", "controllability"])
            p.add_argument("--levels", type=int, default=None)
            p.add_argument("--distances", default=None)
        if name == "converge":
            p.add_argument("--oracle", choices=["dirac", "quantile", "lp", "value"], default=None)
            p.add_argument("--ground-truth", dest="ground_truth", type=float)
            p.add_argument("--name")
        if name == "jko":
            p.add_argument("--penalty", choices=["potential", "quadratic", "entropy"], default=None)
            p.add_argument("--strength", type=float, default=None, help="penalty scale lambda")
            p.add_argument("--target", default=None, help="minimum a of the quadratic potential")
    return parser


DEFAULTS = {"model": "fv", "surface": "sphere", "pattern": "right", "mean": "arithmetic",
            "oracle": "quantile", "assumption": "all", "levels": 3, "distances": "0.25,0.5,1.0",
            "penalty": "potential", "strength": 1.0, "target": "1", "seed": 0}


def _apply_spec(args):
    """Fill unset flags from --spec, then from defaults."""
    spec = {}
    if args.spec:
        if not os.path.exists(args.spec):
            raise ValidationError(f"spec file {args.spec!r} not found")
        try:
            with open(args.spec) as fh:
                spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"spec file is not valid JSON: {exc}") from None
        if not isinstance(spec, dict):
            raise ValidationError("spec must be a JSON object")
        mode = spec.get("mode")
        if mode and mode != args.command:
            raise ValidationError(f"spec mode {mode!r} does not match command {args.command!r}")
    args.solver = spec.get("solver", {})
    for key, value in spec.items():
        key = key.replace("-", "_")
        if key in ("mode", "solver"):
            continue
        if not hasattr(args, key):
            raise ValidationError(f"unknown spec field {key!r}")
        if getattr(args, key) is None:
            if isinstance(value, list) and key in ("cells", "N", "subdiv", "domain"):
                value = ",".join(str(v) for v in np.ravel(value))
            setattr(args, key, value)
    for key, value in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)
    if args.jobs is None:
        args.jobs = default_jobs()
    if args.jobs < 1:
        raise ValidationError("--jobs must be at least 1")
    for path in (args.out, args.json):
        if path and os.path.dirname(path):
            os.makedirs(os.path.dirname(path), exist_ok=True)
    if args.fig_dir:
        os.makedirs(args.fig_dir, exist_ok=True)
    return args


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        _apply_spec(args)
        return COMMANDS[args.command](args)
    except (ValidationError, ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        print(f"otbb: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
