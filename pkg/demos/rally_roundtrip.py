"""Generate one synthetic rally, re-detect its events and refit each segment."""

import numpy as np

from ttball.camera import broadcast_camera, project_points
from ttball.curation import curate, fit_segments
from ttball.rallygen import FailedPoint, build_pools, generate_rally
from ttball.segmentation import annotate_rally
from ttball.trajectory import rad_to_hz


def main(seed: int = 0) -> None:
    pools = build_pools(200, rng_seed=1)
    rally = generate_rally(seed, pools)
    while isinstance(rally, FailedPoint):
        seed += 1
        rally = generate_rally(seed, pools)
    print(f"rally seed {seed}: {len(rally.segments)} segments, "
          f"{rally.total_duration:.2f} s, hits at {np.round(rally.hit_times, 3)}")

    cam = broadcast_camera(np.random.default_rng(seed))
    tr = rally.sampled(120.0)
    tr = tr.replace(p2d=project_points(cam, tr.p3d))
    ann = annotate_rally(tr)
    print(f"detected hits {np.round([h.t for h in ann.hits], 3)}")
    print(f"detected bounces {np.round([b.t for b in ann.bounces], 3)}")

    fits = fit_segments(tr, ann)
    for seg, fit in zip(ann.segments, fits):
        w = rad_to_hz(fit.x0_star.omega)
        print(f"  segment {seg.t_start:.3f}-{seg.t_end:.3f} s: rmse {fit.rmse:.2e} m, "
              f"spin {np.round(w, 1)} Hz")
    verdict = curate(tr, ann, cam, fits, [(-2.0, 0.8), (2.0, 0.8)])
    print(f"curation: accepted={verdict.accepted} reason={verdict.reason}")


if __name__ == "__main__":
    main()
