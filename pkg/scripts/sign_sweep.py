"""Adjoint vs forward-difference gradient signs along a Young's modulus sweep.

    python scripts/sign_sweep.py tree --lo 1250 --hi 20000 --truth 4000 --dx 5
    python scripts/sign_sweep.py torus --lo 500 --hi 50000 --truth 5000 --dx 5 --noise 0.001
"""
import argparse
from pathlib import Path

import numpy as np

from sscinv.adjoint import InverseProblem, sign_sweep
from sscinv.pipeline import inverse_config, synthesize
from sscinv.scenes import torus_scene, tree_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("scene", choices=["tree", "torus"])
    ap.add_argument("--lo", type=float, required=True)
    ap.add_argument("--hi", type=float, required=True)
    ap.add_argument("--truth", type=float, required=True)
    ap.add_argument("--points", type=int, default=20)
    ap.add_argument("--dx", type=float, default=5.0, help="forward-difference step")
    ap.add_argument("--noise", type=float, help="camera noise sigma in voxels (scene default otherwise)")
    ap.add_argument("--out", type=Path, default=Path("sweep.csv"))
    args = ap.parse_args()

    make = tree_scene if args.scene == "tree" else torus_scene
    scene = make() if args.noise is None else make(noise=args.noise)
    grid = scene.build_grid()
    prob = InverseProblem(grid, synthesize(scene, grid), inverse_config(scene))
    values = np.geomspace(args.lo, args.hi, args.points)
    sweep = sign_sweep(prob, scene.params, "youngs_modulus", values, args.truth, args.dx)
    with open(args.out, "w") as fh:
        fh.write("k,cost,adjoint,forward_fd,adjoint_ok,forward_ok\n")
        for s in sweep:
            fh.write(f"{s.value},{s.cost},{s.adjoint},{s.forward},{int(s.adjoint_ok)},{int(s.forward_ok)}\n")
            print(f"k={s.value:10.1f}  J={s.cost:.6e}  adjoint={s.adjoint: .3e}  fd={s.forward: .3e}"
                  f"  {'ok' if s.adjoint_ok else 'WRONG'}/{'ok' if s.forward_ok else 'WRONG'}")
    print(f"sign errors: adjoint {sum(not s.adjoint_ok for s in sweep)}, "
          f"forward FD {sum(not s.forward_ok for s in sweep)} of {len(sweep)}")


if __name__ == "__main__":
    main()
