"""Command-line entry point for reproducible runs.

Subcommands: ``track`` (suboptimal tracking loop), ``oracle``
(full-accuracy reference loop), ``experiment {dt-sweep, rate,
contraction, compare}``. Every run writes its data CSV plus a manifest
sufficient to re-run the cell exactly. Grids use inclusive
``start:stop:step`` syntax, lists use commas. OPTRACK_THREADS caps
parallel experiment cells.

Exit codes: 0 ok, 2 usage, 3 numerical failure, 4 I/O.
"""

import argparse
import os
import sys

import numpy as np

from . import __version__
from ._kernels import backend_name
from .errors import NonConvergenceError, NumericsError, OptrackError
from .experiments import (
    contraction_probe,
    drift_schedule,
    dt_sweep,
    normalized_l2,
    rate_experiment,
    run_tracker,
    write_csv,
    write_manifest,
)
from .nmpc import (
    default_dc_motor_spec,
    run_closed_loop,
    run_oracle_loop,
    square_wave,
)
from .programs import (
    BlockVector,
    PrimalDualPoint,
    load_program,
    program_hash,
    project_onto_blocks,
)
from .solver import StepReport, TrackerConfig, TrackerState, solve_to_convergence, track_step
from .toy import toy_program

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

# benchmark runs that need the reference solver start near the closed-loop
# equilibrium; cold (0, 0) starts make the first horizon infeasible at
# large sampling periods
BENCH_X0 = "4.8,-2.0"


class UsageError(Exception):
    pass


def parse_floats(text):
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"cannot parse float list {text!r}: {exc}") from exc


def parse_grid(text):
    """Inclusive start:stop:step grid, or a comma list, or one value."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"grid must be start:stop:step, got {text!r}")
        try:
            start, stop, step = (float(v) for v in parts)
        except ValueError as exc:
            raise UsageError(f"cannot parse grid {text!r}: {exc}") from exc
        if step <= 0 or stop < start:
            raise UsageError(f"grid {text!r} must have step > 0 and stop >= start")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return start + step * np.arange(count)
    return parse_floats(text)


def parse_int_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"cannot parse integer list {text!r}: {exc}") from exc


def _workers():
    try:
        return max(1, int(os.environ.get("OPTRACK_THREADS", "1")))
    except ValueError:
        return 1


def _out_dir(args, default_leaf):
    return args.out or os.path.join("runs", default_leaf)


def _manifest(args, extra):
    payload = {
        "command": args.command,
        "seed": args.seed,
        "backend": backend_name,
        "version": __version__,
        "config": {
            k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in vars(args).items() if k not in ("func",)
        },
    }
    payload.update(extra)
    return payload


def _load_schedule(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(v) for v in line.split(",")])
    if not rows:
        raise UsageError(f"schedule file {path} is empty")
    return np.asarray(rows, dtype=np.float64)


def _tracker_config(args):
    if args.rho is None:
        raise UsageError("--rho is required")
    if args.M is None:
        raise UsageError("--M is required")
    return TrackerConfig(rho=args.rho, M=args.M, alpha=args.alpha, path=args.path)


def _closed_loop_inputs(args):
    spec = default_dc_motor_spec(args.dt)
    x0 = parse_floats(args.x0)
    refs = square_wave(args.steps, args.dt, args.ref_amplitude, args.ref_period)
    return spec, x0, refs


def cmd_track(args):
    out = _out_dir(args, "track")
    if args.builtin == "dc-motor":
        cfg = _tracker_config(args)
        spec, x0, refs = _closed_loop_inputs(args)
        trace = run_closed_loop(spec, cfg, x0, refs, args.steps,
                                oracle_tol=args.tol)
        trace.write_csv(os.path.join(out, "trace.csv"))
        write_manifest(os.path.join(out, "manifest.json"), _manifest(args, {
            "tolerances": {"oracle_tol": args.tol},
            "error_steps": trace.error_steps,
        }))
        return EXIT_OK
    prog, schedule = _program_and_schedule(args)
    cfg = _tracker_config(args)
    w0 = _schedule_start(prog)
    state = TrackerState(cfg, w0)
    rows = []
    for k, s in enumerate(schedule):
        _, report = track_step(prog, state, s)
        rows.extend(report.csv_rows(k))
    write_csv(os.path.join(out, "steps.csv"), StepReport.CSV_HEADER, rows)
    write_manifest(os.path.join(out, "manifest.json"), _manifest(args, {
        "program_hash": program_hash(prog),
        "tolerances": {"pg_tol": cfg.pg_tol},
    }))
    return EXIT_OK


def _program_and_schedule(args):
    if args.builtin == "toy":
        prog = toy_program()
    elif args.program:
        prog = load_program(args.program)
    else:
        raise UsageError("need --builtin {dc-motor,toy} or --program FILE")
    if args.schedule:
        schedule = _load_schedule(args.schedule)
    elif args.builtin == "toy":
        schedule = drift_schedule(np.array([1.0]), args.drift, args.steps)
    else:
        raise UsageError("need --schedule FILE for --program runs")
    if schedule.shape[1] != prog.parameter_dim:
        raise UsageError(
            f"schedule rows have {schedule.shape[1]} entries, program "
            f"parameter dimension is {prog.parameter_dim}"
        )
    return prog, schedule


def _schedule_start(prog):
    z0 = project_onto_blocks(prog, np.zeros(prog.layout.total))
    return PrimalDualPoint(BlockVector(prog.layout, z0),
                           np.zeros(prog.num_constraints))


def cmd_oracle(args):
    out = _out_dir(args, "oracle")
    if args.builtin == "dc-motor":
        spec, x0, refs = _closed_loop_inputs(args)
        trace = run_oracle_loop(spec, x0, refs, args.steps, tol=args.tol,
                                rho=args.rho or 50.0)
        trace.write_csv(os.path.join(out, "trace.csv"))
        write_manifest(os.path.join(out, "manifest.json"), _manifest(args, {
            "tolerances": {"tol": args.tol},
        }))
        return EXIT_OK
    prog, schedule = _program_and_schedule(args)
    rho = args.rho or 10.0
    w = _schedule_start(prog)
    rows = []
    for k, s in enumerate(schedule):
        res = solve_to_convergence(prog, w, s, rho=rho, tol=args.tol)
        w = res.point
        rows.append(f"{k},{res.residual!r},{res.outer_iterations}")
    write_csv(os.path.join(out, "solutions.csv"),
              "step,kkt_residual,outer_iterations", rows)
    write_manifest(os.path.join(out, "manifest.json"), _manifest(args, {
        "program_hash": program_hash(prog),
        "tolerances": {"tol": args.tol},
    }))
    return EXIT_OK


def cmd_experiment(args):
    out = _out_dir(args, f"experiment-{args.kind}")
    if args.kind == "dt-sweep":
        if args.budget is None:
            raise UsageError("--budget is required for dt-sweep")
        dt_grid = parse_grid(args.dt_grid)
        cells = dt_sweep(
            default_dc_motor_spec, args.budget, dt_grid, args.T,
            parse_floats(args.x0), rho=args.rho or 50.0, alpha=args.alpha,
            ref_amplitude=args.ref_amplitude, ref_period=args.ref_period,
            oracle_tol=args.tol, workers=_workers(),
        )
        rows = [f"{c.dt!r},{c.M_per_step},{c.nl2_error!r}" for c in cells]
        write_csv(os.path.join(out, "dt_sweep.csv"),
                  "dt,M_per_step,nl2_error", rows)
        write_manifest(os.path.join(out, "manifest.json"), _manifest(args, {
            "tolerances": {"oracle_tol": args.tol},
            "infeasible_dts": [c.dt for c in cells if c.infeasible],
            "strained_oracle_dts": [c.dt for c in cells if not c.oracle_converged],
        }))
        return EXIT_OK

    if args.kind == "rate":
        M_values = parse_int_list(args.M_list)
        if args.builtin == "toy":
            prog = toy_program()
            s = np.array([1.0])
            z0 = np.array([0.5, 0.5])
        else:
            spec = default_dc_motor_spec(args.dt)
            from .nmpc import build_nmpc_program, rollout_initial_point
            prog = build_nmpc_program(spec)
            x0 = parse_floats(args.x0)
            s = x0
            z0 = rollout_initial_point(spec, x0).z.data
        mu = np.zeros(prog.num_constraints)
        fit = rate_experiment(prog, z0, mu, s, M_values, rho=args.rho or 10.0,
                              alpha=args.alpha)
        rows = [f"{int(M)},{e!r}" for M, e in zip(fit.M_values, fit.errors)]
        write_csv(os.path.join(out, "rate.csv"), "M,error", rows)
        write_manifest(os.path.join(out, "manifest.json"), _manifest(args, {
            "program_hash": program_hash(prog),
            "psi_hat": fit.psi_hat, "C_hat": fit.C_hat,
        }))
        return EXIT_OK

    if args.kind == "contraction":
        if args.rho_grid is None or args.M_grid is None:
            raise UsageError("--rho-grid and --M-grid are required")
        prog = toy_program()
        schedule = drift_schedule(np.array([1.0]), args.drift, args.steps)
        from .toy import toy_solution
        w0 = toy_solution(schedule[0, 0])
        cells = contraction_probe(
            prog, schedule, w0, parse_grid(args.rho_grid),
            parse_int_list(args.M_grid), alpha=args.alpha,
            workers=_workers(),
        )
        rows = [
            f"{c.rho!r},{c.M},{c.beta_w!r},{c.beta_s!r},{c.residual!r}"
            for c in cells
        ]
        write_csv(os.path.join(out, "contraction.csv"),
                  "rho,M,beta_w,beta_s,residual", rows)
        write_manifest(os.path.join(out, "manifest.json"), _manifest(args, {
            "program_hash": program_hash(prog),
            "degenerate_cells": [[c.rho, c.M] for c in cells if c.degenerate],
        }))
        return EXIT_OK

    if args.kind == "compare":
        cfg = TrackerConfig(rho=args.rho or 50.0, M=args.M or 30,
                            alpha=args.alpha, path=args.path)
        spec, x0, refs = _closed_loop_inputs(args)
        oracle = run_oracle_loop(spec, x0, refs, args.steps, tol=args.tol)
        tracked = run_closed_loop(spec, cfg, x0, refs, args.steps,
                                  oracle_tol=args.tol)
        nl2 = normalized_l2(tracked.x[:, 1], oracle.x[:, 1])
        rows = [
            f"{k},{k * args.dt!r},{tracked.x[k, 1]!r},{oracle.x[k, 1]!r},"
            f"{tracked.u[k, 0]!r},{oracle.u[k, 0]!r}"
            for k in range(args.steps)
        ]
        write_csv(
            os.path.join(out, "compare.csv"),
            "k,t_seconds,speed_tracked,speed_oracle,u_tracked,u_oracle", rows,
        )
        write_manifest(os.path.join(out, "manifest.json"), _manifest(args, {
            "nl2_error": nl2, "tolerances": {"tol": args.tol},
        }))
        return EXIT_OK

    raise UsageError(f"unknown experiment {args.kind!r}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="optrack",
        description="Parametric multi-convex optimality tracking runs.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps_default=200):
        p.add_argument("--builtin", choices=["dc-motor", "toy"])
        p.add_argument("--program", help="program JSON file")
        p.add_argument("--schedule", help="CSV of parameter rows")
        p.add_argument("--dt", type=float, default=0.01)
        p.add_argument("--steps", type=int, default=steps_default)
        p.add_argument("--rho", type=float)
        p.add_argument("--M", type=int)
        p.add_argument("--alpha", type=float, default=1e-6)
        p.add_argument("--path", choices=["direct", "lifted"], default="lifted")
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--drift", type=float, default=0.01)
        p.add_argument("--x0", default="0.0,0.0")
        p.add_argument("--ref-amplitude", type=float, default=2.0)
        p.add_argument("--ref-period", type=float, default=2.0)
        p.add_argument("--out")
        p.add_argument("--seed", type=int, default=0)

    p_track = sub.add_parser("track", help="suboptimal tracking loop")
    common(p_track)
    p_track.set_defaults(func=cmd_track)

    p_oracle = sub.add_parser("oracle", help="full-accuracy reference loop")
    common(p_oracle)
    p_oracle.set_defaults(func=cmd_oracle)

    p_exp = sub.add_parser("experiment", help="experiment drivers")
    p_exp.add_argument("kind",
                       choices=["dt-sweep", "rate", "contraction", "compare"])
    common(p_exp)
    p_exp.add_argument("--budget", type=float, help="iterations per second")
    p_exp.add_argument("--dt-grid", default="0.008:0.048:0.008")
    p_exp.add_argument("--T", type=float, default=1.6,
                       help="simulated seconds per cell")
    p_exp.add_argument("--M-list", default="1,2,5,10,20,50")
    p_exp.add_argument("--rho-grid")
    p_exp.add_argument("--M-grid")
    p_exp.set_defaults(func=cmd_experiment, x0=BENCH_X0)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonConvergenceError, NumericsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OptrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
