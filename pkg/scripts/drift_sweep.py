"""VIR vs VIO-only ATE over seeds on the drift scenario.

    python scripts/drift_sweep.py --seeds 20 --out runs/drift
"""
import argparse
import csv
import time
from pathlib import Path

import numpy as np

from rangevio.config import bundled_scenario, load_scenario
from rangevio.scenario import run_scenario


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(bundled_scenario("drift_demo")))
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    cfg = load_scenario(args.config)
    rows = []
    for seed in range(args.seeds):
        t0 = time.perf_counter()
        res = run_scenario(cfg, seed=seed)
        rep = res.report
        a = rep.extra["anchor_estimate"]
        aerr = np.linalg.norm(np.asarray(a) - cfg.anchor) if a is not None else np.nan
        rows.append((seed, rep.ate_rmse, rep.baseline_ate_rmse, aerr, rep.extra["path_length"]))
        print(f"seed {seed:3d}  VIR {rep.ate_rmse:.3f}  VIO {rep.baseline_ate_rmse:.3f}  anchor err {aerr:.3f}"
              f"  ({time.perf_counter() - t0:.1f} s)", flush=True)

    r = np.array(rows)
    print(f"median VIR {np.median(r[:, 1]):.3f}  VIO {np.median(r[:, 2]):.3f}  "
          f"ratio {np.median(r[:, 1]) / np.median(r[:, 2]):.2f}  wins {int(np.sum(r[:, 1] < r[:, 2]))}/{len(r)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "drift_sweep.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["seed", "ate_vir", "ate_vio", "anchor_error", "path_length"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
