"""Time gn_solve and the full refinement pipeline on full-resolution synthetic scenes."""
import argparse
import time

import numpy as np

from senseflow.rigid import build_rigid_mask, gn_solve, refine_scene_flow
from senseflow.synth import driving_scene, render_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenes", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--height", type=int, default=375)
    ap.add_argument("--width", type=int, default=1242)
    a = ap.parse_args()

    print("seed,pixels,iterations,gn_median_s,refine_median_s")
    warmed = False
    for seed in range(a.scenes):
        spec = driving_scene(seed, a.height, a.width, moving_object=True)
        b = render_scene(spec, images=False)
        B = build_rigid_mask(b.labels)
        if not warmed:
            gn_solve(b.flow, b.disp1, B, spec.camera)
            warmed = True
        gn_t, ref_t = [], []
        for _ in range(a.repeats):
            t0 = time.perf_counter()
            _, trace = gn_solve(b.flow, b.disp1, B, spec.camera)
            gn_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            refine_scene_flow(b.flow, b.disp1, b.disp2, b.labels, spec.camera)
            ref_t.append(time.perf_counter() - t0)
        print(f"{seed},{trace.num_pixels},{trace.iterations},{np.median(gn_t):.4f},{np.median(ref_t):.4f}")


if __name__ == "__main__":
    main()
