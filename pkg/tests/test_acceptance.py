"""Acceptance gate: one PASS/FAIL line per criterion, at the stated tolerances and time budgets."""

import copy
import time
from pathlib import Path

import numpy as np
import pytest

from rangevio import geom, preint
from rangevio.config import (CameraSpec, EstimatorConfig, LandmarkSpec, NoiseSpec, ScenarioConfig, TrajectorySpec,
                             bundled_scenario, load_scenario)
from rangevio.evaluation import compute_ate, improvement_pct, start_to_end_error
from rangevio.factors import (Intrinsics, SingularGeometryError, relative_link_residual, schur_marginalize,
                              uwb_range_residual, vision_residual)
from rangevio.multi_robot import (AmbiguousGeometryError, FrameTransform, RendezvousObservation, TransformError,
                                  estimate_transform, wrap_angle)
from rangevio.preint import bias_correct, imu_residual, preintegrate
from rangevio.scenario import run_estimator, run_scenario, simulate_scenario, truth_trajectory
from conftest import numeric_jacobian, random_quat, random_state, rel_err

pytestmark = pytest.mark.slow


def test_c1_table_arithmetic(acceptance):
    t0 = time.perf_counter()
    i1 = improvement_pct(0.388, 0.291)
    i2 = improvement_pct(0.240, 0.188)
    a2, a3, _ = start_to_end_error((4.29, 3.35, 0.52))
    b2, b3, _ = start_to_end_error((-0.04, 0.14, 0.84))
    dt = time.perf_counter() - t0
    ok = (abs(i1 - 24.84) < 0.5 and abs(i2 - 21.76) < 0.5 and abs(a2 - 5.439) < 0.01 and abs(a3 - 5.465) < 0.01
          and abs(b2 - 0.148) < 0.01 and abs(b3 - 0.853) < 0.01 and dt < 1.0)
    acceptance("C1 table arithmetic", ok,
               f"improvement {i1:.2f}% / {i2:.2f}%, start-to-end {a2:.3f}/{a3:.3f} and {b2:.3f}/{b3:.3f} m, {dt:.3f} s")
    assert ok


def _pose_plus(P, d):
    return geom.Pose(geom.quat_mul(P.rotation, geom.quat_exp(d[3:6])), P.translation + d[0:3])


def test_c2_jacobian_suite(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}

    e = 0.0
    for _ in range(100):
        p, a = rng.uniform(-10, 10, 3), rng.uniform(-10, 10, 3)
        d, g = rng.uniform(0, 15), rng.uniform(1, 1000)
        _, Jp, Ja = uwb_range_residual(p, a, d, g)
        e = max(e, rel_err(Jp, numeric_jacobian(lambda x: uwb_range_residual(x, a, d, g)[0], p, 3)[0]),
                rel_err(Ja, numeric_jacobian(lambda x: uwb_range_residual(p, x, d, g)[0], a, 3)[0]))
    worst["uwb"] = e

    e = 0.0
    for _ in range(100):
        pt, pj, z = rng.normal(0, 5, (3, 3))
        g = rng.uniform(1, 1e4)
        _, Jt, Jj = relative_link_residual(pt, pj, z, g)
        e = max(e, rel_err(Jt, numeric_jacobian(lambda x: relative_link_residual(x, pj, z, g)[0], pt, 3)),
                rel_err(Jj, numeric_jacobian(lambda x: relative_link_residual(pt, x, z, g)[0], pj, 3)))
    worst["link"] = e

    K = Intrinsics.from_camera(CameraSpec(body_from_cam_t=(0.05, -0.02, 0.01)))
    e, n = 0.0, 0
    while n < 100:
        Pi = geom.Pose(random_quat(rng), rng.uniform(-2, 2, 3))
        Pj = _pose_plus(Pi, np.r_[rng.normal(0, 0.3, 3), rng.normal(0, 0.1, 3)])
        uv1, lam = rng.uniform([50, 50], [590, 430]), 1.0 / rng.uniform(2, 10)
        uv2 = uv1 + rng.normal(0, 3, 2)
        try:
            _, Ji, Jj, Jl = vision_residual(Pi, Pj, lam, uv1, uv2, K)
        except SingularGeometryError:
            continue
        f = lambda P, Q, l: vision_residual(P, Q, l, uv1, uv2, K)[0]
        e = max(e, rel_err(Ji, numeric_jacobian(lambda P: f(P, Pj, lam), Pi, 6, _pose_plus)),
                rel_err(Jj, numeric_jacobian(lambda Q: f(Pi, Q, lam), Pj, 6, _pose_plus)),
                rel_err(Jl, numeric_jacobian(lambda l: f(Pi, Pj, l[0]), np.array([lam]), 1)[:, 0]))
        n += 1
    worst["vision"] = e

    t = np.linspace(0.0, 0.4, 81)
    acc = np.stack([1.5 * np.sin(2 * t), 0.8 * np.cos(3 * t), 9.81 + 0.3 * np.sin(t)], axis=1)
    gyr = np.stack([0.3 * np.cos(t), -0.2 * np.sin(2 * t), 0.5 + 0.1 * t], axis=1)
    G = np.array([0.0, 0.0, -9.81])
    plus = lambda s, d: s.boxplus(d)
    e = 0.0
    for _ in range(100):
        pre = preintegrate(t, acc + rng.normal(0, 0.2, acc.shape), gyr + rng.normal(0, 0.05, gyr.shape),
                           rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3))
        si, sj = random_state(rng), random_state(rng, stamp=0.4)
        L = pre.sqrt_information()
        _, Ji, Jj = imu_residual(si, sj, pre, G, L)
        e = max(e, rel_err(Ji, numeric_jacobian(lambda s: imu_residual(s, sj, pre, G, L, jacobians=False)[0],
                                                si, 15, plus)),
                rel_err(Jj, numeric_jacobian(lambda s: imu_residual(si, s, pre, G, L, jacobians=False)[0],
                                             sj, 15, plus)))
    worst["imu"] = e

    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and dt < 30.0
    acceptance("C2 Jacobian suite", ok,
               ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (100 states each), {dt:.1f} s")
    assert ok


def test_c3_zero_noise_circle(acceptance):
    t0 = time.perf_counter()
    cfg = ScenarioConfig(name="exact", seed=0, anchor=(1.0, 0.5, 2.0),
                         trajectory=TrajectorySpec(shape="circle", radius=5.0, duration=60.0, imu_rate=200,
                                                   cam_rate=4, uwb_rate=4),
                         noise=NoiseSpec(), landmarks=LandmarkSpec(count=300, max_features=18),
                         estimator=EstimatorConfig(keyframe_min_tracked=12), run_baseline=False)
    run = simulate_scenario(cfg)
    res = run_estimator(run, cfg)
    ate, _, _ = compute_ate(res.trajectory, truth_trajectory(run.truth), align="none")
    dt = time.perf_counter() - t0
    ok = ate < 1e-3 and dt < 60.0
    acceptance("C3 exact recovery", ok, f"ATE {ate:.2e} m on r=5 m / 60 s circle (unaligned), {dt:.1f} s")
    assert ok


def test_c4_drift_correction(acceptance):
    t0 = time.perf_counter()
    cfg = load_scenario(bundled_scenario("drift_demo"))
    vir, vio, path = [], [], []
    for seed in range(20):
        rep = run_scenario(cfg, seed=seed).report
        vir.append(rep.ate_rmse)
        vio.append(rep.baseline_ate_rmse)
        path.append(rep.extra["path_length"])
    vir, vio = np.array(vir), np.array(vio)
    dt = time.perf_counter() - t0
    ratio = np.median(vir) / np.median(vio)
    wins = int(np.sum(vir < vio))
    ok = 0.3 <= np.median(vio) <= 1.0 and ratio <= 0.8 and wins >= 18 and dt < 600
    acceptance("C4 drift correction", ok,
               f"median ATE VIR {np.median(vir):.3f} vs VIO {np.median(vio):.3f} m (ratio {ratio:.2f}), "
               f"VIR wins {wins}/20, path {np.mean(path):.0f} m, {dt:.0f} s")
    assert ok


def test_c5_anchor_initialization(acceptance):
    t0 = time.perf_counter()
    base = load_scenario(bundled_scenario("anchor_init"))
    errs = []
    for seed in range(50):
        cfg = copy.deepcopy(base)
        cfg.seed = seed
        a = run_estimator(simulate_scenario(cfg), cfg).estimator.graph.anchor
        fixed = a is not None and a.fixed
        errs.append(np.linalg.norm(a.position - np.array(cfg.anchor)) if fixed else np.inf)
    errs = np.array(errs)
    frac = float(np.mean(errs < 0.15))

    line = copy.deepcopy(base)
    line.anchor = (0.0, 0.0, 0.0)
    line.trajectory = TrajectorySpec(shape="waypoint-spline", duration=12.0, imu_rate=200, cam_rate=4, uwb_rate=4,
                                     waypoints=((-12.0, 0.0, 0.0), (-2.0, 0.0, 0.0)))
    collinear_fixed = 0
    for seed in range(3):
        line.seed = seed
        est = run_estimator(simulate_scenario(line), line).estimator
        collinear_fixed += int(est.graph.anchor is not None and est.graph.anchor.fixed)
    dt = time.perf_counter() - t0
    ok = frac >= 0.9 and collinear_fixed == 0 and dt < 300
    acceptance("C5 anchor initialization", ok,
               f"{frac:.0%} of 50 seeds fixed within 0.15 m (median {np.median(errs):.3f} m), "
               f"collinear approach fixed {collinear_fixed}/3, {dt:.0f} s")
    assert ok


def _rendezvous_trial(sigma, rng):
    T = FrameTransform(rng.uniform(-np.pi, np.pi), rng.uniform(-5, 5, 3))
    anchor = rng.uniform(-3, 3, 3)
    obs = []
    for k in range(2):
        own = anchor + rng.uniform(-6, 6, 3)
        peer_own_frame = anchor + rng.uniform(-6, 6, 3)
        d = abs(np.linalg.norm(own - peer_own_frame) + sigma * rng.standard_normal())
        obs.append(RendezvousObservation(float(k), own, T.apply(peer_own_frame),
                                         T.apply(anchor) + sigma * rng.standard_normal(3),
                                         anchor + sigma * rng.standard_normal(3), d))
    return T, obs


def test_c6_multi_robot_transform(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    stats = {}
    for sigma in (0.0, 0.05):
        ye, te, skipped = [], [], 0
        for _ in range(1000):
            T, obs = _rendezvous_trial(sigma, rng)
            try:
                E = estimate_transform(*obs, sigma=sigma)
            except TransformError:
                skipped += 1
                continue
            ye.append(abs(float(wrap_angle(E.yaw - T.yaw))))
            te.append(np.linalg.norm(E.t - T.t))
        stats[sigma] = (np.array(ye), np.array(te), skipped)

    anchor = np.array([0.0, 0.0, 2.0])
    T = FrameTransform(0.5, [1.0, 1.0, 0.0])
    pa = T.apply(anchor)
    own = [anchor + [2.0, 0.0, -2.0], anchor + [4.0, 0.0, -2.0]]
    peer = [pa + [0.0, 3.0, -2.0], pa + [0.0, 5.0, -2.0]]
    sym = [RendezvousObservation(float(k), own[k], peer[k], pa, anchor,
                                 float(np.linalg.norm(T.apply(own[k]) - peer[k]))) for k in range(2)]
    try:
        estimate_transform(*sym)
        ambiguous = False
    except AmbiguousGeometryError:
        ambiguous = True
    dt = time.perf_counter() - t0

    y0, t0_, s0 = stats[0.0]
    y1, t1, s1 = stats[0.05]
    exact = max(y0.max(), t0_.max())
    ok = exact < 1e-6 and np.degrees(np.median(y1)) < 2.0 and np.median(t1) < 0.3 and ambiguous and dt < 120
    acceptance("C6 multi-robot transform", ok,
               f"noise-free max error {exact:.1e} ({s0} ambiguous draws skipped), sigma=0.05: median yaw "
               f"{np.degrees(np.median(y1)):.2f} deg, median translation {np.median(t1):.3f} m over {len(y1)} "
               f"solved trials ({s1} rejected), symmetric case ambiguous={ambiguous}, {dt:.1f} s")
    assert ok


def test_c7_preintegration(acceptance):
    t0 = time.perf_counter()
    t = np.linspace(0.0, 1.0, 1001)
    n = len(t)
    p1 = preintegrate(t, np.tile([2.0, 0.0, 0.0], (n, 1)), np.zeros((n, 3)))
    p2 = preintegrate(t, np.zeros((n, 3)), np.tile([0.0, 0.0, np.pi / 2], (n, 1)))
    closed = max(np.max(np.abs(p1.alpha - [1.0, 0.0, 0.0])), np.max(np.abs(p1.beta - [2.0, 0.0, 0.0])),
                 np.linalg.norm(geom.quat_boxminus(p2.gamma, geom.yaw_quat(np.pi / 2))),
                 np.max(np.abs(p2.alpha)), np.max(np.abs(p2.beta)))

    worst = 0.0
    for which, T in (("a", 1.0), ("w", 0.25)):
        ts = np.linspace(0.0, T, int(round(200 * T)) + 1)
        acc = np.stack([1.5 * np.sin(2 * ts), 0.8 * np.cos(3 * ts), 9.81 + 0.3 * np.sin(ts)], axis=1)
        gyr = np.stack([0.3 * np.cos(ts), -0.2 * np.sin(2 * ts), 0.5 + 0.1 * ts], axis=1)
        ba, bw = np.array([0.02, -0.01, 0.03]), np.array([0.001, 0.002, -0.001])
        pre = preintegrate(ts, acc, gyr, ba, bw)
        d = np.array([0.6e-3, -0.5e-3, 0.6e-3])  # |d| = 1e-3 (rounded)
        ba1, bw1 = (ba + d, bw) if which == "a" else (ba, bw + d)
        c, f = bias_correct(pre, ba1, bw1), preintegrate(ts, acc, gyr, ba1, bw1)
        worst = max(worst, np.max(np.abs(c.alpha - f.alpha)), np.max(np.abs(c.beta - f.beta)),
                    np.linalg.norm(geom.quat_boxminus(c.gamma, f.gamma)))
    dt = time.perf_counter() - t0
    ok = closed < 1e-6 and worst < 1e-6 and dt < 10
    acceptance("C7 preintegration", ok,
               f"closed forms {closed:.1e}, bias correction vs reintegration {worst:.1e} "
               f"(accel over 1 s, gyro over 0.25 s), {dt:.2f} s")
    assert ok


def test_c8_marginalization(acceptance):
    t0 = time.perf_counter()
    A = np.array([[1.0, 0, 0], [-1.0, 1, 0], [0, -1.0, 1]])
    w = np.array([10.0, 5.0, 1 / 0.3])
    J = w[:, None] * A
    r0 = -w * np.array([0.5, 1.2, 0.9])
    H, b = J.T @ J, J.T @ r0
    full = np.linalg.solve(H, -b)
    Hm, bm, keep = schur_marginalize(H, b, [0])
    err = float(np.max(np.abs(np.linalg.solve(Hm, -bm) - full[keep])))
    dt = time.perf_counter() - t0
    ok = err < 1e-9 and dt < 1.0
    acceptance("C8 marginalization", ok, f"retained-variable error {err:.1e}, {dt:.3f} s")
    assert ok


def test_c9_determinism(acceptance, tmp_path):
    t0 = time.perf_counter()
    a = run_scenario(bundled_scenario("drift_demo"), seed=7, out=tmp_path / "a")
    b = run_scenario(bundled_scenario("drift_demo"), seed=7, out=tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    same = same and names == sorted(p.name for p in (tmp_path / "b").iterdir())
    dt = time.perf_counter() - t0
    acceptance("C9 determinism", same, f"{len(names)} output files bit-identical across two runs, {dt:.0f} s")
    assert same and a.report.ate_rmse == b.report.ate_rmse
