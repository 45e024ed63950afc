"""Monte-Carlo of the two-range frame transform solver.

Random frame transforms, anchors and rendezvous positions; noise on the inter-robot
range and on both anchor estimates.
"""
import argparse
from collections import Counter

import numpy as np

from rangevio.multi_robot import FrameTransform, RendezvousObservation, TransformError, estimate_transform, wrap_angle


def trial(sigma, rng):
    T = FrameTransform(rng.uniform(-np.pi, np.pi), rng.uniform(-5, 5, 3))
    anchor = rng.uniform(-3, 3, 3)
    obs = []
    for k in range(2):
        own = anchor + rng.uniform(-6, 6, 3)
        peer = anchor + rng.uniform(-6, 6, 3)
        d = abs(np.linalg.norm(own - peer) + sigma * rng.standard_normal())
        obs.append(RendezvousObservation(float(k), own, T.apply(peer), T.apply(anchor) + sigma * rng.standard_normal(3),
                                         anchor + sigma * rng.standard_normal(3), d))
    return T, obs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--sigmas", default="0,0.02,0.05,0.1")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    for sigma in map(float, args.sigmas.split(",")):
        yaw, tr, fails = [], [], Counter()
        for _ in range(args.trials):
            T, obs = trial(sigma, rng)
            try:
                E = estimate_transform(*obs, sigma=sigma)
            except TransformError as exc:
                fails[type(exc).__name__] += 1
                continue
            yaw.append(np.degrees(abs(wrap_angle(E.yaw - T.yaw))))
            tr.append(np.linalg.norm(E.t - T.t))
        print(f"sigma {sigma:.3f}: median yaw {np.median(yaw):.3f} deg, p90 {np.percentile(yaw, 90):.3f}; "
              f"median t {np.median(tr):.3f} m, p90 {np.percentile(tr, 90):.3f}; rejected {dict(fails)}")


if __name__ == "__main__":
    main()
