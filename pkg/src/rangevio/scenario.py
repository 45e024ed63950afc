"""End-to-end runs: simulate, estimate with and without UWB, evaluate, write outputs."""

from __future__ import annotations

import copy
import json
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io, sim
from .config import ScenarioConfig, load_scenario, to_dict
from .estimator import Estimator
from .evaluation import EvalReport, evaluate
from .factors import Intrinsics
from .state import RobotState

log = logging.getLogger(__name__)

DIAG_COLUMNS = ["stamp", "n_short", "n_long", "n_landmarks", "keyframe", "iterations", "converged",
                "diverged", "cost", "cost_prior", "cost_imu", "cost_vision", "cost_range", "cost_link",
                "anchor_x", "anchor_y", "anchor_z", "anchor_fixed"]


@dataclass
class EstimateResult:
    trajectory: io.Trajectory
    diagnostics: list
    estimator: Estimator


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    sim: sim.SimulatedRun
    truth: io.Trajectory
    vir: EstimateResult
    vio: EstimateResult | None
    report: EvalReport
    files: dict = field(default_factory=dict)
    rendezvous: object = None  # RendezvousResult when the scenario has a peer


def truth_trajectory(gt: sim.GroundTruth, idx=None) -> io.Trajectory:
    idx = gt.cam_idx if idx is None else idx
    return io.Trajectory(gt.t[idx], gt.p[idx], gt.q[idx])


def associate_ranges(ranges, cam_stamps, max_dt=None):
    """Attach each range to the nearest camera frame; one range per frame at most."""
    cam_stamps = np.asarray(cam_stamps, dtype=float)
    if max_dt is None:
        max_dt = 0.5 * float(np.median(np.diff(cam_stamps))) if len(cam_stamps) > 1 else 0.0
    out = {}
    for r in ranges:
        k = int(np.argmin(np.abs(cam_stamps - r.t)))
        gap = abs(cam_stamps[k] - r.t)
        if gap > max_dt + 1e-12:
            continue
        if k not in out or gap < abs(cam_stamps[k] - out[k].t):
            out[k] = r
    return out


def initial_state(gt: sim.GroundTruth, i) -> RobotState:
    """Ground-truth pose and velocity at IMU sample ``i``; biases start at zero."""
    return RobotState(gt.p[i], gt.v[i], gt.q[i], stamp=float(gt.t[i]))


def run_estimator(run: sim.SimulatedRun, cfg: ScenarioConfig, use_uwb=True, init_state=None,
                  initial_biases=None) -> EstimateResult:
    ecfg = copy.deepcopy(cfg.estimator)
    ecfg.use_uwb = bool(use_uwb and ecfg.use_uwb)
    est = Estimator(ecfg, Intrinsics.from_camera(cfg.camera))
    gt = run.truth
    cam_idx = gt.cam_idx
    ranges = associate_ranges(run.ranges, gt.t[cam_idx]) if ecfg.use_uwb else {}
    s0 = init_state if init_state is not None else initial_state(gt, cam_idx[0])
    if initial_biases is not None:
        s0.b_a = np.asarray(initial_biases[0], dtype=float)
        s0.b_w = np.asarray(initial_biases[1], dtype=float)
    frames = run.frames if ecfg.use_vision else [{} for _ in cam_idx]
    est.initialize(s0, frames[0], ranges.get(0))

    stamps, ps, qs, diag = [float(gt.t[cam_idx[0]])], [s0.p.copy()], [s0.q.copy()], []
    for k in range(1, len(cam_idx)):
        seg = run.imu.segment(cam_idx[k - 1], cam_idx[k])
        pre = est.preintegrate(seg.t, seg.accel, seg.gyro)
        rep = est.add_frame(pre, frames[k], ranges.get(k))
        newest = est.frames[-1].state
        stamps.append(newest.stamp)
        ps.append(newest.p.copy())
        qs.append(newest.q.copy())
        a = est.graph.anchor
        c = rep.costs
        diag.append([newest.stamp, len(est.frames), len(est.graph.long_window), len(est.graph.landmarks),
                     int(est.frames[-1].is_keyframe), rep.iterations, int(rep.converged), int(rep.diverged),
                     rep.final_cost, c.get("prior", 0.0), c.get("imu", 0.0), c.get("vision", 0.0),
                     c.get("range", 0.0), c.get("link", 0.0),
                     *(a.position if a is not None else (np.nan, np.nan, np.nan)),
                     int(a.fixed) if a is not None else 0])
    return EstimateResult(io.Trajectory(np.array(stamps), np.array(ps), np.array(qs)), diag, est)


def simulate_scenario(cfg: ScenarioConfig) -> sim.SimulatedRun:
    noise = copy.deepcopy(cfg.noise)
    noise.rng_seed = cfg.seed
    return sim.simulate(cfg.trajectory, noise, cfg.camera, cfg.landmarks, cfg.anchor)


def run_scenario(cfg: ScenarioConfig | str | Path, seed=None, out=None, use_uwb=True,
                 anchor=None) -> ScenarioResult:
    """Simulate ``cfg``, run the ranging-aided estimator and (optionally) the VIO-only baseline.

    Everything is derived from ``cfg.seed`` so repeated calls are bit-identical.
    """
    if not isinstance(cfg, ScenarioConfig):
        cfg = load_scenario(cfg)
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg.seed = int(seed)
    if anchor is not None:
        cfg.anchor = tuple(float(x) for x in anchor)
    run = simulate_scenario(cfg)
    truth = truth_trajectory(run.truth)
    vir = run_estimator(run, cfg, use_uwb=use_uwb)
    vio = run_estimator(run, cfg, use_uwb=False) if (cfg.run_baseline and use_uwb) else None
    report = evaluate(vir.trajectory, truth, vio.trajectory if vio else None, cfg.alignment)
    a = vir.estimator.graph.anchor
    report.extra = {
        "seed": cfg.seed,
        "anchor_true": [float(x) for x in cfg.anchor],
        "anchor_estimate": None if a is None else [float(x) for x in a.position],
        "anchor_fixed": bool(a is not None and a.fixed),
        "anchor_fixed_at": vir.estimator.anchor_fixed_at,
        "path_length": float(np.sum(np.linalg.norm(np.diff(truth.p, axis=0), axis=1))),
        "warnings": list(vir.estimator.warnings),
    }
    result = ScenarioResult(cfg, run, truth, vir, vio, report)
    if cfg.peer is not None and use_uwb:
        from .rendezvous import run_rendezvous

        result.rendezvous = run_rendezvous(cfg, run, vir)
        report.extra["rendezvous"] = result.rendezvous.report
    if out is not None:
        result.files = write_outputs(result, out)
    return result


def write_measurements(run: sim.SimulatedRun, out) -> dict:
    """Ground truth at camera rate, sensor streams and the exact initial state."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "truth": out / "groundtruth.tum",
        "imu": out / "imu.csv",
        "ranges": out / "ranges.csv",
        "features": out / "features.csv",
        "initial_state": out / "initial_state.json",
    }
    gt = run.truth
    io.save_tum(files["truth"], truth_trajectory(gt))
    io.save_imu(files["imu"], run.imu)
    io.save_ranges(files["ranges"], run.ranges)
    io.save_features(files["features"], gt.t[gt.cam_idx], run.frames)
    k = gt.cam_idx[0]
    init = {"stamp": float(gt.t[k]), "p": gt.p[k].tolist(), "v": gt.v[k].tolist(), "q": gt.q[k].tolist()}
    files["initial_state"].write_text(json.dumps(init, indent=2) + "\n")
    return files


def load_run(directory, anchor=(0.0, 0.0, 0.0)) -> sim.SimulatedRun:
    """Rebuild a run from files written by :func:`write_measurements`.

    Only what the estimator consumes is restored: IMU, ranges, features, camera
    stamps and the initial state. Ground-truth arrays other than the camera-rate
    poses are left as zeros.
    """
    d = Path(directory)
    imu = io.load_imu(d / "imu.csv")
    truth = io.load_tum(d / "groundtruth.tum")
    ranges = io.load_ranges(d / "ranges.csv") if (d / "ranges.csv").exists() else []
    f_stamps, f_frames = io.load_features(d / "features.csv")
    by_stamp = dict(zip(f_stamps, f_frames))
    cam_idx = np.searchsorted(imu.t, truth.t)
    cam_idx = np.clip(cam_idx, 0, len(imu.t) - 1)
    if np.any(np.abs(imu.t[cam_idx] - truth.t) > 1e-6):
        raise io.FormatError(f"{d}: camera stamps do not coincide with IMU samples")
    n = len(imu.t)
    p, v, q = np.zeros((n, 3)), np.zeros((n, 3)), np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    p[cam_idx], q[cam_idx] = truth.p, truth.q
    init_path = d / "initial_state.json"
    if init_path.exists():
        init = json.loads(init_path.read_text())
        p[cam_idx[0]], v[cam_idx[0]], q[cam_idx[0]] = init["p"], init["v"], init["q"]
    elif len(truth) > 1:
        v[cam_idx[0]] = (truth.p[1] - truth.p[0]) / (truth.t[1] - truth.t[0])
    gt = sim.GroundTruth(imu.t.copy(), p, v, np.zeros((n, 3)), q, np.zeros((n, 3)), cam_idx)
    frames = [dict(by_stamp.get(t, {})) for t in truth.t]
    return sim.SimulatedRun(gt, imu, ranges, frames, {}, np.zeros((0, 3)), np.asarray(anchor, dtype=float))


def write_diagnostics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAG_COLUMNS)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def write_outputs(result: ScenarioResult, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = result.sim
    files = write_measurements(run, out)
    files.update({
        "vir": out / "vir.tum",
        "diagnostics": out / "diagnostics.csv",
        "report": out / "report.json",
        "config": out / "config.json",
    })
    io.save_tum(files["vir"], result.vir.trajectory)
    write_diagnostics(files["diagnostics"], result.vir.diagnostics)
    if result.vio is not None:
        files["vio"] = out / "vio.tum"
        io.save_tum(files["vio"], result.vio.trajectory)
    if result.rendezvous is not None:
        from .rendezvous import write_rendezvous

        files.update(write_rendezvous(result.rendezvous, out))
    result.report.to_json(files["report"])
    files["config"].write_text(json.dumps(to_dict(result.config), indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in files.items()}
