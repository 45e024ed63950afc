"""Two-robot rendezvous runs: each robot estimates in its own world frame, they
exchange (position, anchor) messages and one range at two instants, and the
inter-robot transform is recovered and used to fuse the peer's trajectory."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom, io, sim
from .config import ScenarioConfig
from .evaluation import compute_ate
from .multi_robot import (FrameTransform, NotReadyError, RendezvousMessage, apply_transform,
                          estimate_transform, observation_from_messages, save_messages, wrap_angle)
from .scenario import EstimateResult, initial_state, run_estimator, truth_trajectory

PEER_SEED_OFFSET = 10_000


@dataclass
class RendezvousResult:
    own_truth: io.Trajectory
    peer_truth: io.Trajectory  # in the peer's own world frame
    own: EstimateResult
    peer: EstimateResult
    own_msgs: list
    peer_msgs: list
    ranges: list  # inter-robot RangeMeasurement per rendezvous
    transform: FrameTransform | None
    true_transform: FrameTransform
    fused: io.Trajectory | None  # peer estimate mapped into the own frame
    report: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)


def peer_frame(cfg: ScenarioConfig) -> FrameTransform:
    """Own (global) frame into peer frame; the config gives the peer frame in global coordinates."""
    p = cfg.peer
    return FrameTransform(p.frame_yaw, np.asarray(p.frame_translation, dtype=float)).inverse()


def message_at(res: EstimateResult, t) -> RendezvousMessage:
    """Message a robot would have sent at its frame nearest ``t``."""
    traj = res.trajectory
    k = int(np.argmin(np.abs(traj.t - t)))
    if k == 0:
        raise NotReadyError("no estimate yet at the rendezvous time")
    row = res.diagnostics[k - 1]  # diagnostics start at the second frame
    if not row[17]:
        raise NotReadyError(f"anchor not fixed at t={traj.t[k]:.2f}")
    return RendezvousMessage(float(traj.t[k]), traj.p[k].copy(), np.array(row[14:17], dtype=float))


def run_rendezvous(cfg: ScenarioConfig, own_run: sim.SimulatedRun | None = None,
                   own: EstimateResult | None = None) -> RendezvousResult:
    if cfg.peer is None:
        raise ValueError("scenario has no peer robot")
    from .scenario import simulate_scenario

    if own_run is None:
        own_run = simulate_scenario(cfg)
    if own is None:
        own = run_estimator(own_run, cfg, use_uwb=True)

    # The peer is simulated in the global frame: IMU, features and ranges do not
    # depend on the world frame, so only its initial state is re-expressed.
    noise = copy.deepcopy(cfg.noise)
    noise.rng_seed = cfg.seed + PEER_SEED_OFFSET
    peer_run = sim.simulate(cfg.peer.trajectory, noise, cfg.camera, cfg.landmarks, cfg.anchor)
    T_true = peer_frame(cfg)
    gt_j = peer_run.truth.transformed(geom.Pose(geom.yaw_quat(T_true.yaw), T_true.t))
    peer = run_estimator(peer_run, cfg, use_uwb=True, init_state=initial_state(gt_j, gt_j.cam_idx[0]))

    rng = sim.stream_rng(cfg.seed, 50)
    own_msgs, peer_msgs, ranges, obs = [], [], [], []
    g_own, g_peer = own_run.truth, peer_run.truth
    for t in cfg.peer.rendezvous_times:
        m_i = message_at(own, t)
        m_j = message_at(peer, t)
        ki = int(np.argmin(np.abs(g_own.t - m_i.stamp)))
        kj = int(np.argmin(np.abs(g_peer.t - m_j.stamp)))
        d = float(np.linalg.norm(g_own.p[ki] - g_peer.p[kj]) + cfg.peer.range_sigma * rng.standard_normal())
        d = abs(d)
        own_msgs.append(m_i)
        peer_msgs.append(m_j)
        ranges.append(sim.RangeMeasurement(m_i.stamp, "peer", d))
        obs.append(observation_from_messages(m_i, m_j, d))

    sigma = max(cfg.peer.range_sigma, cfg.noise.uwb_sigma)
    T = estimate_transform(obs[0], obs[1], sigma=sigma)
    fused = apply_transform(T.inverse(), peer.trajectory)
    peer_truth_global = truth_trajectory(g_peer)
    ate, _, _ = compute_ate(fused, peer_truth_global, align="none")
    report = {
        "yaw_error_deg": float(np.degrees(abs(wrap_angle(T.yaw - T_true.yaw)))),
        "translation_error": float(np.linalg.norm(T.t - T_true.t)),
        "estimated": {"yaw": T.yaw, "t": [float(x) for x in T.t]},
        "true": {"yaw": T_true.yaw, "t": [float(x) for x in T_true.t]},
        "fused_peer_error_rmse": float(ate),
        "rendezvous_stamps": [m.stamp for m in own_msgs],
        "ranges": [r.distance for r in ranges],
    }
    return RendezvousResult(truth_trajectory(g_own), truth_trajectory(gt_j), own, peer, own_msgs, peer_msgs,
                            ranges, T, T_true, fused, report)


def write_rendezvous(res: RendezvousResult, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "peer_truth": out / "peer_groundtruth.tum",
        "peer_estimate": out / "peer_vir.tum",
        "fused": out / "peer_fused.tum",
        "own_messages": out / "own_messages.csv",
        "peer_messages": out / "peer_messages.csv",
        "peer_ranges": out / "peer_ranges.csv",
        "transform": out / "transform.json",
    }
    io.save_tum(files["peer_truth"], res.peer_truth)
    io.save_tum(files["peer_estimate"], res.peer.trajectory)
    io.save_tum(files["fused"], res.fused)
    save_messages(files["own_messages"], res.own_msgs)
    save_messages(files["peer_messages"], res.peer_msgs)
    io.save_ranges(files["peer_ranges"], res.ranges)
    files["transform"].write_text(json.dumps(res.report, indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in files.items()}
