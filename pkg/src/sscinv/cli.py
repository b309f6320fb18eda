"""Command line entry point: forward, observe, gradcheck, optimize, convert-units."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_ALL_FAILED = 3

log = logging.getLogger("sscinv")


def _set_threads(n: int) -> None:
    # must run before numpy/scipy load their BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _scene(args):
    from .scenes import builtin_scene, load_scene

    if args.scene and args.builtin:
        raise _ConfigProblem("give either --scene or --builtin, not both")
    if args.builtin:
        return builtin_scene(args.builtin)
    if args.scene:
        return load_scene(args.scene)
    raise _ConfigProblem("a scene is required (--scene FILE or --builtin NAME)")


class _ConfigProblem(ValueError):
    pass


def _out_dir(args, scene) -> Path:
    out = Path(args.out or scene.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ----------------------------------------------------------------------


def cmd_init(args) -> int:
    from .scenes import builtin_scene

    scene = builtin_scene(args.name)
    scene.save(args.path)
    print(f"wrote {args.path}")
    return EXIT_OK


def cmd_forward(args) -> int:
    from dataclasses import replace

    from .dynamics import write_trajectory
    from .pipeline import simulate

    scene = _scene(args)
    if args.steps is not None:
        scene.simulation = replace(scene.simulation, steps=args.steps)
        scene.validate()
    grid = scene.build_grid()
    traj = simulate(scene, grid)
    out = _out_dir(args, scene)
    write_trajectory(out, grid, traj, scene.params)
    print(f"{traj.steps} steps, {grid.n_cells} cells, {grid.n_nodes} nodes -> {out}")
    return EXIT_OK


def cmd_observe(args) -> int:
    from .dynamics import read_trajectory
    from .observation import generate_observations, write_observations

    scene = _scene(args)
    grid = scene.build_grid()
    if not Path(args.trajectory).is_dir():
        raise _ConfigProblem(f"trajectory directory not found: {args.trajectory}")
    traj = read_trajectory(args.trajectory, grid)
    every = args.every_nth or scene.every_nth
    seq = generate_observations(grid, traj, scene.cameras, every, scene.observation_seed)
    write_observations(seq, args.out)
    print(f"{len(seq.frames)} frames, {seq.n_points} points -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .adjoint import InverseProblem, compare_gradients, sign_sweep, write_comparison
    from .observation import read_observations
    from .pipeline import inverse_config, synthesize

    scene = _scene(args)
    grid = scene.build_grid()
    obs = read_observations(args.observations) if args.observations else synthesize(scene, grid)
    problem = InverseProblem(grid, obs, inverse_config(scene))
    params = scene.params
    if args.at:
        params = params.with_values(_pairs(args.at))
    names = tuple(args.params.split(",")) if args.params else params.optimize
    rows = compare_gradients(problem, params, names, forward_dx=args.forward_dx)
    sweep = None
    if args.sweep:
        name, lo, hi, n = args.sweep[0], float(args.sweep[1]), float(args.sweep[2]), int(args.sweep[3])
        values = np.geomspace(lo, hi, n) if lo > 0 else np.linspace(lo, hi, n)
        sweep = sign_sweep(problem, params, name, values, scene.params.get(name), args.forward_dx or 5.0)
    out = _out_dir(args, scene)
    write_comparison(out / "gradcheck.csv", rows, sweep)
    for r in rows:
        print(f"{r.name:20s} adjoint {r.adjoint: .6e}  central {r.central: .6e}  rel {r.rel_error:.2e}")
    print(f"max relative error {max(r.rel_error for r in rows):.3e}")
    if sweep is not None:
        print(f"sign errors over {len(sweep)} sweep points: adjoint {sum(not s.adjoint_ok for s in sweep)}, "
              f"forward FD {sum(not s.forward_ok for s in sweep)}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    from .dynamics import write_trajectory
    from .observation import read_observations, write_observations
    from .pipeline import optimize_scene, simulate, synthesize

    scene = _scene(args)
    if args.runs is not None:
        scene.batch.runs = args.runs
    if args.iterations is not None:
        scene.optimizer.iterations = args.iterations
    scene.validate()
    grid = scene.build_grid()
    out = _out_dir(args, scene)
    if args.observations:
        obs = read_observations(args.observations)
    else:
        obs = synthesize(scene, grid)
        write_observations(obs, out / "observations.txt")
    batch = optimize_scene(scene, obs, threads=args.threads, grid=grid)
    batch.write(out)
    if batch.best < 0:
        print("every run failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    best = batch.runs[batch.best]
    params = scene.params.with_values(best.final)
    write_trajectory(out / "best_trajectory", grid, simulate(scene, grid, params), params)
    print(f"best run {best.run_id}: cost {best.final_cost:.6g} " + " ".join(f"{k}={v:.6g}" for k, v in best.final.items()))
    return EXIT_OK


def cmd_convert_units(args) -> int:
    from .units import calibrate, si_report

    scene = _scene(args)
    cal = calibrate(scene.build_sdf(), args.size, args.mass, args.framerate, scene.params.mass_density,
                    scene.build_grid())
    params = scene.params
    if args.params:
        with open(args.params) as fh:
            d = json.load(fh)
        values = d.get("best_params", d) if isinstance(d, dict) else None
        if not isinstance(values, dict):
            raise _ConfigProblem(f"{args.params}: expected a JSON object of parameter values")
        params = params.with_values(values)
    rows = si_report(params, cal)
    if args.json:
        print(json.dumps({"calibration": cal.to_dict(), "rows": [list(r) for r in rows]}, indent=2, default=float))
    else:
        print(f"f_size {cal.f_size:.6g}  f_mass {cal.f_mass:.6g}  f_time {cal.f_time:.6g}")
        for q, v, s, unit in rows:
            print(f"{q:20s} {v: .6g} -> {s: .6g} {unit}")
    return EXIT_OK


def _pairs(items) -> dict:
    out = {}
    for it in items:
        k, sep, v = it.partition("=")
        if not sep:
            raise _ConfigProblem(f"expected NAME=VALUE, got {it!r}")
        out[k] = float(v)
    return out


# --- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sscinv", description=__doc__)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker processes for batches and BLAS threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scene_args(sp):
        sp.add_argument("--scene", help="scene JSON file")
        sp.add_argument("--builtin", help="built-in scene name (torus, ball, bounce, tree, bar)")
        sp.add_argument("--out", help="output location (default: the scene's output directory)")

    sp = sub.add_parser("init", help="write a built-in scene as an editable JSON file")
    sp.add_argument("name")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("forward", help="simulate and write per-step fields plus summary.csv")
    scene_args(sp)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("observe", help="render synthetic depth observations of a trajectory")
    scene_args(sp)
    sp.add_argument("--trajectory", required=True, help="directory written by 'forward'")
    sp.add_argument("--every-nth", type=int)
    sp.set_defaults(func=cmd_observe)

    sp = sub.add_parser("gradcheck", help="adjoint gradient against finite differences")
    scene_args(sp)
    sp.add_argument("--observations", help="observation file (default: synthesized from the scene)")
    sp.add_argument("--params", help="comma-separated parameter names (default: the scene's optimized set)")
    sp.add_argument("--at", nargs="*", help="evaluate at NAME=VALUE instead of the scene values")
    sp.add_argument("--forward-dx", type=float, help="step of the coarse forward-difference estimate")
    sp.add_argument("--sweep", nargs=4, metavar=("NAME", "LO", "HI", "N"), help="sign sweep of one parameter")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("optimize", help="batch optimization from perturbed starts")
    scene_args(sp)
    sp.add_argument("--observations", help="observation file (default: synthesized from the scene)")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("convert-units", help="report parameters in SI units")
    scene_args(sp)
    sp.add_argument("--size", type=float, required=True, help="real object size along its longest axis, m")
    sp.add_argument("--mass", type=float, required=True, help="real object mass, kg")
    sp.add_argument("--framerate", type=float, required=True, help="camera framerate, Hz")
    sp.add_argument("--params", help="JSON with parameter values (e.g. an optimize summary.json)")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_convert_units)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    import numpy as np

    from .cost import CostError
    from .dynamics import SolverError
    from .fem import MaterialError
    from .grid import GridError
    from .observation import ObservationFormatError
    from .params import ParameterError
    from .scenes import ConfigError
    from .units import CalibrationError

    try:
        return args.func(args)
    except (ConfigError, ParameterError, GridError, ObservationFormatError, CalibrationError, MaterialError,
            _ConfigProblem, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, CostError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
