"""Pose error of Huber-IRLS versus plain least squares as the outlier fraction grows."""
import argparse
import math

import numpy as np

from senseflow.rigid import GnOptions, gn_solve, rotation_error, translation_error
from senseflow.synth import driving_scene, render_scene


def pose_error(xi, gt):
    return max(rotation_error(xi, gt), translation_error(xi, gt))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fractions", default="0,0.05,0.1,0.2,0.3,0.4")
    ap.add_argument("--magnitude", type=float, default=20.0, help="outlier offset in px, random sign")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--delta", type=float, default=1.345)
    a = ap.parse_args()

    print("fraction,seed,huber_error,ls_error,huber_iters")
    for seed in range(a.seeds):
        spec = driving_scene(seed)
        b = render_scene(spec, images=False)
        for frac in (float(f) for f in a.fractions.split(",")):
            r = np.random.default_rng(seed)
            flow = b.flow.copy()
            bad = r.random(flow.shape[:2]) < frac
            flow[bad] += r.choice([-a.magnitude, a.magnitude], size=(int(bad.sum()), 2))
            xi_h, tr = gn_solve(flow, b.disp1, b.valid, spec.camera, GnOptions(huber_delta=a.delta))
            xi_ls, _ = gn_solve(flow, b.disp1, b.valid, spec.camera, GnOptions(huber_delta=math.inf))
            print(f"{frac},{seed},{pose_error(xi_h, spec.ego):.3e},{pose_error(xi_ls, spec.ego):.3e},"
                  f"{tr.iterations}")


if __name__ == "__main__":
    main()
