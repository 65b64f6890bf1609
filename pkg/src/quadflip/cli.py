"""Command-line entry point: ``quadflip <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input (schema errors name
the offending ``section.key``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, feedforward as ff
from .planner import FlipReference, PlanarBox, PlanningError, SigmoidAttitudeParams, plan_flip
from .rigid import VehicleParams
from .scenario import (OUTPUT_ROOT_ENV, SchemaError, compare_runs, envelope, load_scenario, run_scenario,
                       training_config)
from .training import train_residual_gps

log = logging.getLogger("quadflip")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadflip", description="Quadrotor flip synthesis toolkit.",
                                epilog=f"Outputs go under ${OUTPUT_ROOT_ENV} (default ./runs) unless --out is given.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario")
    r.add_argument("--out", help="output directory (overrides the scenario and the output root)")

    o = sub.add_parser("optimize", help="offline optimisation tasks")
    osub = o.add_subparsers(dest="task", required=True)
    fp = osub.add_parser("flip-params", help="Bayesian optimisation of the feedforward flip parameters")
    fp.add_argument("config")
    fp.add_argument("--out")
    gt = osub.add_parser("gp-train", help="train the residual-torque GPs and export lookup tables")
    gt.add_argument("config")
    gt.add_argument("--out")

    pl = sub.add_parser("plan", help="plan a flip reference with the QP planner")
    pl.add_argument("--nu-m", type=float, default=35.0)
    pl.add_argument("--t-m", type=float, default=0.7)
    pl.add_argument("--x-min", type=float, default=-0.15)
    pl.add_argument("--x-max", type=float, default=0.0)
    pl.add_argument("--h-min", type=float, default=0.0, help="lower height bound (z-up), m")
    pl.add_argument("--h-max", type=float, default=0.3, help="upper height bound (z-up), m")
    pl.add_argument("--f-max", type=float, default=None, help="collective thrust limit, N (default 4·t_max)")
    pl.add_argument("--ts", type=float, default=2e-3)
    pl.add_argument("--vehicle", help="vehicle parameter file")
    pl.add_argument("--z-up", action="store_true", help="write the CSV in z-up coordinates")
    pl.add_argument("--out")

    c = sub.add_parser("compare", help="compare tracking errors of finished runs")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out")

    sub.add_parser("version", help="print the package version")
    return p


def _out(arg: Optional[str], default_name: str) -> Path:
    import os
    return Path(arg) if arg else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name


def _cmd_run(a) -> int:
    sc = load_scenario(a.scenario)
    summary = run_scenario(sc, a.out)
    print(json.dumps({k: summary[k] for k in ("scenario", "mode", "max_psi", "max_er", "final_pitch_error",
                                               "saturation_count", "runtime_s")}, sort_keys=True))
    return EXIT_OK


def _cmd_flip_params(a) -> int:
    sc = load_scenario(a.config, purpose="optimize")
    out = Path(a.out) if a.out else sc.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    o = sc["optimizer"]
    resume = sc.resolve(o["resume"]) if o["resume"] else None
    if resume is not None and not resume.exists():
        raise SchemaError("optimizer.resume", f"file {resume} does not exist")
    res = ff.optimize_flip(sc.vehicle(), envelope(sc), n_init=o["n_init"], n_iter=o["n_iter"], seed=sc.seed,
                           archive_path=out / "archive.csv", resume_from=resume, retune_every=o["retune_every"])
    res.save(out / "eta.json")
    print(json.dumps(res.to_json(), sort_keys=True))
    return EXIT_OK


def _cmd_gp_train(a) -> int:
    sc = load_scenario(a.config, purpose="optimize")
    out = Path(a.out) if a.out else sc.output_dir()
    from .scenario import reference
    params = sc.vehicle()
    res = train_residual_gps(params, sc.disturbance(), training_config(sc), reference(sc, params), sc.gains())
    res.save(out)
    print(json.dumps({k: res.report[k] for k in ("coverage", "rmse", "n_train", "n_holdout")}, sort_keys=True))
    return EXIT_OK


def _cmd_plan(a) -> int:
    params = VehicleParams.from_file(a.vehicle) if a.vehicle else VehicleParams()
    plan = plan_flip(SigmoidAttitudeParams(a.nu_m, a.t_m), PlanarBox(a.x_min, a.x_max, a.h_min, a.h_max),
                     f_max=a.f_max, Ts=a.ts, params=params)
    ref = FlipReference(plan)
    out = _out(a.out, "plan")
    out.mkdir(parents=True, exist_ok=True)
    ref.to_csv(out / "reference.csv", z_up=a.z_up)
    ref.to_json(out / "reference.json")
    print(json.dumps(plan.stats(), sort_keys=True))
    return EXIT_OK


def _cmd_compare(a) -> int:
    missing = [d for d in a.run_dirs if not Path(d).is_dir()]
    if missing:
        print(f"quadflip: run directory not found: {missing[0]}", file=sys.stderr)
        return EXIT_USAGE
    res = compare_runs(a.run_dirs, _out(a.out, "compare"))
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if a.command == "version":
            print(__version__)
            return EXIT_OK
        if a.command == "run":
            return _cmd_run(a)
        if a.command == "optimize":
            return _cmd_flip_params(a) if a.task == "flip-params" else _cmd_gp_train(a)
        if a.command == "plan":
            return _cmd_plan(a)
        if a.command == "compare":
            return _cmd_compare(a)
    except SchemaError as exc:
        print(f"quadflip: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PlanningError, ff.InfeasibleScheduleError, RuntimeError, ValueError, OSError) as exc:
        print(f"quadflip: {exc.__class__.__module__}.{exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
