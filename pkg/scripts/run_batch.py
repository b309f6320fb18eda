"""Synthesize observations for a built-in scene and run its optimization batch.

    python scripts/run_batch.py torus --out runs/torus
    python scripts/run_batch.py bounce --setting 2 --runs 20
"""
import argparse
import json
import time
from pathlib import Path

from sscinv.pipeline import optimize_scene, synthesize
from sscinv.scenes import BUILTIN_SCENES, bounce_scene, builtin_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("scene", choices=sorted(BUILTIN_SCENES))
    ap.add_argument("--setting", type=int, default=0, help="ground/velocity seed for the bounce scene")
    ap.add_argument("--runs", type=int)
    ap.add_argument("--iterations", type=int)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("runs"))
    args = ap.parse_args()

    scene = bounce_scene(args.setting) if args.scene == "bounce" else builtin_scene(args.scene)
    if args.runs:
        scene.batch.runs = args.runs
    if args.iterations:
        scene.optimizer.iterations = args.iterations
    grid = scene.build_grid()
    obs = synthesize(scene, grid)
    t0 = time.perf_counter()
    batch = optimize_scene(scene, obs, threads=args.threads, grid=grid)
    elapsed = time.perf_counter() - t0
    args.out.mkdir(parents=True, exist_ok=True)
    batch.write(args.out)
    truth = {n: scene.params.get(n) for n in scene.params.optimize}
    (args.out / "truth.json").write_text(json.dumps({"truth": truth, "seconds": elapsed}, indent=2) + "\n")
    print(f"{scene.name}: {len(batch.runs)} runs in {elapsed / 60:.1f} min, best run {batch.best}")
    for r in batch.runs:
        vals = ", ".join(f"{n}={r.final.get(n, float('nan')):.4g}" for n in truth)
        print(f"  run {r.run_id:2d} cost {r.costs[0] if r.costs else float('nan'):.4g} -> {r.final_cost:.4g}  {vals}")


if __name__ == "__main__":
    main()
