"""Command line: ``rangevio {simulate,estimate,evaluate,rendezvous,sweep}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ScenarioConfig, bundled_scenario, load_scenario, to_dict

log = logging.getLogger("rangevio")


def resolve_config(name_or_path) -> ScenarioConfig:
    """A TOML path, or the name of a bundled scenario such as ``drift_demo``."""
    p = Path(name_or_path)
    if p.exists():
        return load_scenario(p)
    return load_scenario(bundled_scenario(str(name_or_path)))


def parse_anchor(text):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        vals = []
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"anchor must be x,y,z, got {text!r}")
    return tuple(vals)


def parse_seeds(text):
    """``"0-19"``, ``"1,4,9"`` or a mix of both."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _scenario(args) -> ScenarioConfig:
    cfg = resolve_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "anchor", None) is not None:
        cfg.anchor = args.anchor
    return cfg


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    from .scenario import simulate_scenario, write_measurements

    cfg = _scenario(args)
    run = simulate_scenario(cfg)
    files = write_measurements(run, args.out)
    (Path(args.out) / "config.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    print(f"simulated {len(run.truth.cam_idx)} frames, {len(run.ranges)} ranges -> {args.out}")
    return files


def cmd_estimate(args):
    from .scenario import load_run, run_estimator, run_scenario, write_diagnostics

    cfg = _scenario(args)
    use_uwb = not args.disable_uwb
    out = Path(args.out)
    if args.data is None:
        res = run_scenario(cfg, out=out, use_uwb=use_uwb)
        rep = res.report
        line = f"ATE {rep.ate_rmse:.4f} m"
        if rep.baseline_ate_rmse is not None:
            line += f" (VIO-only {rep.baseline_ate_rmse:.4f} m, improvement {rep.improvement_vs_baseline:.1f}%)"
        print(line + f" -> {out}")
        return res
    run = load_run(args.data, cfg.anchor)
    res = run_estimator(run, cfg, use_uwb=use_uwb)
    out.mkdir(parents=True, exist_ok=True)
    name = "vir.tum" if use_uwb else "vio.tum"
    io.save_tum(out / name, res.trajectory)
    write_diagnostics(out / "diagnostics.csv", res.diagnostics)
    print(f"estimated {len(res.trajectory)} poses -> {out / name}")
    return res


def cmd_evaluate(args):
    from .evaluation import evaluate

    d = Path(args.out)
    est_path = Path(args.estimate) if args.estimate else d / "vir.tum"
    truth_path = Path(args.truth) if args.truth else d / "groundtruth.tum"
    base_path = Path(args.baseline) if args.baseline else (d / "vio.tum" if est_path != d / "vio.tum" else None)
    est = io.load_tum(est_path)
    truth = io.load_tum(truth_path)
    base = io.load_tum(base_path) if base_path is not None and base_path.exists() else None
    rep = evaluate(est, truth, base, args.align)
    d.mkdir(parents=True, exist_ok=True)
    rep.to_json(d / "report.json")
    print(rep.to_json())
    return rep


def cmd_rendezvous(args):
    if args.own_messages:
        return _rendezvous_offline(args)
    from .scenario import run_scenario

    cfg = _scenario(args)
    if cfg.peer is None:
        raise ConfigError("scenario has no [peer] table")
    res = run_scenario(cfg, out=args.out, use_uwb=True)
    rv = res.report.extra["rendezvous"]
    print(f"yaw error {rv['yaw_error_deg']:.3f} deg, translation error {rv['translation_error']:.3f} m, "
          f"fused peer RMSE {rv['fused_peer_error_rmse']:.3f} m -> {args.out}")
    return res


def _rendezvous_offline(args):
    """Transform from two message files and an inter-robot range file."""
    from .multi_robot import estimate_transform, load_messages, observation_from_messages

    own = load_messages(args.own_messages)
    peer = load_messages(args.peer_messages)
    ranges = io.load_ranges(args.ranges)
    if not (len(own) >= 2 and len(peer) >= 2 and len(ranges) >= 2):
        raise ValueError("need two messages from each robot and two ranges")
    obs = [observation_from_messages(own[k], peer[k], ranges[k].distance) for k in range(2)]
    T = estimate_transform(obs[0], obs[1], sigma=args.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"yaw": T.yaw, "t": [float(x) for x in T.t], "matrix": T.matrix().tolist()}
    (out / "transform.json").write_text(json.dumps(payload, indent=2) + "\n")
    if args.peer_trajectory:
        from .multi_robot import apply_transform

        io.save_tum(out / "peer_fused.tum", apply_transform(T.inverse(), io.load_tum(args.peer_trajectory)))
    print(json.dumps(payload))
    return T


def _sweep_one(job):
    cfg, seed, out, use_uwb = job
    from .scenario import run_scenario

    res = run_scenario(cfg, seed=seed, out=None if out is None else Path(out) / f"seed_{seed:03d}",
                       use_uwb=use_uwb)
    rep = res.report
    return {"seed": seed, "ate": rep.ate_rmse, "ate_vio": rep.baseline_ate_rmse,
            "improvement_pct": rep.improvement_vs_baseline, "anchor_fixed": rep.extra["anchor_fixed"],
            "start_to_end_3d": rep.start_to_end_3d}


def cmd_sweep(args):
    cfg = _scenario(args)
    seeds = args.seeds if args.seeds else list(range(cfg.seed, cfg.seed + args.n_seeds))
    jobs = [(cfg, s, args.out if args.keep_runs else None, not args.disable_uwb) for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(_sweep_one, jobs))
    else:
        rows = []
        for job in jobs:
            rows.append(_sweep_one(job))
            r = rows[-1]
            print(f"seed {r['seed']}: ATE {r['ate']:.4f}" + (f"  VIO {r['ate_vio']:.4f}" if r["ate_vio"] else ""),
                  flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["seed", "ate", "ate_vio", "improvement_pct", "anchor_fixed", "start_to_end_3d"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        w.writerows(rows)
    ate = np.array([r["ate"] for r in rows])
    summary = {"n": len(rows), "median_ate": float(np.median(ate))}
    if all(r["ate_vio"] is not None for r in rows):
        vio = np.array([r["ate_vio"] for r in rows])
        summary.update(median_ate_vio=float(np.median(vio)), ratio=float(np.median(ate) / np.median(vio)),
                       wins=int(np.sum(ate < vio)))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary))
    return summary


# ---------------------------------------------------------------- parser

def build_parser():
    ap = argparse.ArgumentParser(prog="rangevio", description="Ranging-aided visual-inertial odometry.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_default="drift_demo"):
        p.add_argument("--config", default=config_default, help="scenario TOML or bundled scenario name")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--anchor", type=parse_anchor, default=None, help="true anchor position x,y,z")

    p = sub.add_parser("simulate", help="generate ground truth and sensor streams")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run the estimator (simulating first unless --data is given)")
    common(p)
    p.add_argument("--disable-uwb", action="store_true", help="VIO-only ablation")
    p.add_argument("--data", default=None, help="directory written by 'simulate'")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="ATE / start-to-end report for TUM trajectories")
    p.add_argument("--out", required=True, help="directory with vir.tum/groundtruth.tum; report goes here")
    p.add_argument("--estimate", default=None)
    p.add_argument("--truth", default=None)
    p.add_argument("--baseline", default=None)
    p.add_argument("--align", default="se3", choices=["se3", "4dof", "none"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rendezvous", help="two-robot frame transform from a shared anchor")
    common(p, "rendezvous_demo")
    p.add_argument("--own-messages", default=None, help="offline mode: own message CSV")
    p.add_argument("--peer-messages", default=None)
    p.add_argument("--ranges", default=None, help="inter-robot ranges CSV")
    p.add_argument("--peer-trajectory", default=None, help="peer TUM file to map into the own frame")
    p.add_argument("--sigma", type=float, default=0.05, help="range noise used for the ambiguity test")
    p.set_defaults(func=cmd_rendezvous)

    p = sub.add_parser("sweep", help="Monte-Carlo over seeds")
    common(p)
    p.add_argument("--seeds", type=parse_seeds, default=None, help="e.g. 0-19 or 1,5,7")
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--disable-uwb", action="store_true")
    p.add_argument("--keep-runs", action="store_true", help="write every run's outputs")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "own_messages", None) and not (args.peer_messages and args.ranges):
        print("error: --own-messages needs --peer-messages and --ranges", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (ConfigError, io.FormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
