import numpy as np
import pytest
from hypothesis import given, strategies as st

from rangevio import geom, preint, sim
from rangevio.config import NoiseSpec, TrajectorySpec
from rangevio.preint import bias_correct, imu_residual, imu_residuals, ImuBatch, predict, preintegrate
from rangevio.state import RobotState
from conftest import numeric_jacobian, random_state, rel_err

G = np.array([0.0, 0.0, -9.81])


def constant_stream(accel, gyro, T=1.0, rate=1000):
    t = np.linspace(0.0, T, int(T * rate) + 1)
    n = len(t)
    return t, np.tile(accel, (n, 1)), np.tile(gyro, (n, 1))


def smooth_stream(rate, T=1.0):
    t = np.linspace(0.0, T, int(round(T * rate)) + 1)
    acc = np.stack([1.5 * np.sin(2 * t), 0.8 * np.cos(3 * t), 9.81 + 0.3 * np.sin(t)], axis=1)
    gyr = np.stack([0.3 * np.cos(t), -0.2 * np.sin(2 * t), 0.5 + 0.1 * t], axis=1)
    return t, acc, gyr


def test_constant_acceleration_closed_form():
    pre = preintegrate(*constant_stream([2.0, 0.0, 0.0], [0.0, 0.0, 0.0]))
    assert np.allclose(pre.alpha, [1.0, 0.0, 0.0], atol=1e-6)
    assert np.allclose(pre.beta, [2.0, 0.0, 0.0], atol=1e-6)
    assert np.allclose(pre.gamma, geom.IDENTITY_QUAT, atol=1e-6)


def test_constant_rate_rotation():
    pre = preintegrate(*constant_stream([0.0, 0.0, 0.0], [0.0, 0.0, np.pi / 2]))
    assert abs(abs(pre.gamma @ geom.yaw_quat(np.pi / 2)) - 1.0) < 1e-12
    assert np.allclose(geom.quat_to_rot(pre.gamma), geom.quat_to_rot(geom.yaw_quat(np.pi / 2)), atol=1e-6)
    assert np.allclose(pre.alpha, 0.0) and np.allclose(pre.beta, 0.0)


def test_single_sample_is_identity():
    pre = preintegrate([3.0], [[0.1, 0.2, 9.8]], [[0.01, 0.0, 0.0]])
    assert pre.dt_total == 0.0
    assert np.array_equal(pre.alpha, np.zeros(3)) and np.array_equal(pre.beta, np.zeros(3))
    assert np.array_equal(pre.gamma, geom.IDENTITY_QUAT)
    s = RobotState(p=[1, 2, 3], stamp=3.0)
    r, _, _ = imu_residual(s, s, pre, G)
    assert np.allclose(r, 0.0)


def test_input_errors():
    with pytest.raises(ValueError):
        preintegrate([], np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        preintegrate([0.0, 0.1, 0.1], np.zeros((3, 3)), np.zeros((3, 3)))


def test_dt_total_is_sum_of_steps():
    t, a, w = smooth_stream(200)
    pre = preintegrate(t, a, w)
    assert abs(pre.dt_total - np.sum(np.diff(t))) < 1e-12


def test_step_refinement():
    coarse = preintegrate(*smooth_stream(200))
    fine = preintegrate(*smooth_stream(2000))
    assert np.max(np.abs(coarse.alpha - fine.alpha)) < 1e-5
    assert np.max(np.abs(coarse.beta - fine.beta)) < 1e-5
    assert np.linalg.norm(geom.quat_boxminus(coarse.gamma, fine.gamma)) < 1e-5


def test_covariance_psd_at_every_length():
    t, a, w = smooth_stream(200, T=0.3)
    for n in range(2, len(t) + 1, 7):
        P = preintegrate(t[:n], a[:n], w[:n]).covariance
        assert np.allclose(P, P.T)
        assert np.linalg.eigvalsh(P).min() > -1e-15


@pytest.mark.parametrize("which", ["a", "w"])
def test_bias_correct_matches_reintegration(which):
    # gyro-bias correction is only first order; its error grows like |a| T^2 |db|^2,
    # so it is checked over one camera interval rather than a full second
    t, a, w = smooth_stream(200, T=1.0 if which == "a" else 0.25)
    ba0, bw0 = np.array([0.02, -0.01, 0.03]), np.array([0.001, 0.002, -0.001])
    pre = preintegrate(t, a, w, ba0, bw0)
    d = np.array([1e-3, 0.0, 0.0]) if which == "a" else np.array([0.6e-3, -0.5e-3, 0.6e-3])
    ba1, bw1 = (ba0 + d, bw0) if which == "a" else (ba0, bw0 + d)
    corr = bias_correct(pre, ba1, bw1)
    full = preintegrate(t, a, w, ba1, bw1)
    assert np.max(np.abs(corr.alpha - full.alpha)) < 1e-6
    assert np.max(np.abs(corr.beta - full.beta)) < 1e-6
    assert np.linalg.norm(geom.quat_boxminus(corr.gamma, full.gamma)) < 1e-6


def test_bias_correct_zero_and_linear():
    t, a, w = smooth_stream(200)
    pre = preintegrate(t, a, w)
    same = bias_correct(pre, np.zeros(3), np.zeros(3))
    assert np.array_equal(same.alpha, pre.alpha) and np.array_equal(same.beta, pre.beta)
    d = np.array([2e-3, -1e-3, 1e-3])
    one = bias_correct(pre, d, 0.5 * d)
    two = bias_correct(pre, 2 * d, d)
    assert np.allclose(two.alpha - pre.alpha, 2 * (one.alpha - pre.alpha), atol=1e-12)
    assert np.allclose(two.beta - pre.beta, 2 * (one.beta - pre.beta), atol=1e-12)
    th1 = geom.quat_boxminus(one.gamma, pre.gamma)
    th2 = geom.quat_boxminus(two.gamma, pre.gamma)
    assert np.allclose(th2, 2 * th1, atol=1e-8)


def test_large_bias_change_reintegrates():
    t, a, w = smooth_stream(200)
    pre = preintegrate(t, a, w)
    new = bias_correct(pre, [0.05, 0.0, 0.0], np.zeros(3))
    full = preintegrate(t, a, w, [0.05, 0.0, 0.0])
    assert np.array_equal(new.alpha, full.alpha)


def test_merge_equals_joint_preintegration():
    t, a, w = smooth_stream(200)
    first = preintegrate(t[:101], a[:101], w[:101])
    second = preintegrate(t[100:], a[100:], w[100:])
    merged = preint.merge(first, second)
    whole = preintegrate(t, a, w)
    assert np.allclose(merged.alpha, whole.alpha) and np.allclose(merged.gamma, whole.gamma)


def _consistent_pair(rng):
    t, a, w = smooth_stream(200, T=0.5)
    bw = rng.normal(0, 0.01, 3)
    ba = rng.normal(0, 0.05, 3)
    pre = preintegrate(t, a, w, ba, bw)
    si = RobotState(rng.uniform(-3, 3, 3), rng.uniform(-1, 1, 3), geom.normalize(rng.standard_normal(4)), ba, bw)
    return si, predict(si, pre, G), pre


def test_residual_zero_for_consistent_states(rng):
    si, sj, pre = _consistent_pair(rng)
    r, _, _ = imu_residual(si, sj, pre, G)
    assert np.max(np.abs(r)) < 1e-8


def test_residual_position_perturbation(rng):
    si, sj, pre = _consistent_pair(rng)
    r0, _, _ = imu_residual(si, sj, pre, G)
    sj2 = sj.copy()
    sj2.p = sj2.p + np.array([0.1, 0.0, 0.0])
    r1, _, _ = imu_residual(si, sj2, pre, G)
    assert np.allclose(r1[:3] - r0[:3], si.R.T @ [0.1, 0.0, 0.0], atol=1e-12)
    assert np.allclose(r1[3:], r0[3:], atol=1e-12)


def test_imu_jacobians_finite_difference():
    rng = np.random.default_rng(7)
    t, a, w = smooth_stream(200, T=0.4)
    worst = 0.0
    for _ in range(100):
        pre = preintegrate(t, a + rng.normal(0, 0.2, a.shape), w + rng.normal(0, 0.05, w.shape),
                           rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3))
        si, sj = random_state(rng), random_state(rng, stamp=0.4)
        L = pre.sqrt_information()
        _, Ji, Jj = imu_residual(si, sj, pre, G, L)
        Ni = numeric_jacobian(lambda s: imu_residual(s, sj, pre, G, L, jacobians=False)[0], si, 15,
                              lambda s, d: s.boxplus(d))
        Nj = numeric_jacobian(lambda s: imu_residual(si, s, pre, G, L, jacobians=False)[0], sj, 15,
                              lambda s, d: s.boxplus(d))
        worst = max(worst, rel_err(Ji, Ni), rel_err(Jj, Nj))
    assert worst < 1e-5


def test_batched_residuals_match_scalar():
    rng = np.random.default_rng(3)
    t, a, w = smooth_stream(200, T=0.3)
    pres, si, sj = [], [], []
    for _ in range(6):
        pres.append(preintegrate(t, a + rng.normal(0, 0.1, a.shape), w, rng.normal(0, 0.05, 3)))
        si.append(random_state(rng))
        sj.append(random_state(rng, 0.3))
    batch = ImuBatch.stack(pres)
    arr = lambda S: tuple(np.array([getattr(s, k) for s in S]) for k in ("p", "v", "q", "b_a", "b_w"))
    r, Ji, Jj = imu_residuals(arr(si), arr(sj), batch, G)
    for k in range(6):
        rk, Jik, Jjk = imu_residual(si[k], sj[k], pres[k], G, pres[k].sqrt_information())
        assert np.allclose(r[k], rk) and np.allclose(Ji[k], Jik) and np.allclose(Jj[k], Jjk)


@given(st.floats(-np.pi, np.pi), st.tuples(*[st.floats(-20, 20)] * 3))
def test_preintegration_is_world_frame_independent(yaw, shift):
    spec = TrajectorySpec(shape="circle", duration=1.0, imu_rate=200, cam_rate=10, uwb_rate=10, radius=2.0)
    gt = sim.gen_trajectory(spec)
    moved = gt.transformed(geom.Pose(geom.yaw_quat(yaw), np.array(shift)))
    imu_a = sim.synth_imu(gt, NoiseSpec())
    imu_b = sim.synth_imu(moved, NoiseSpec())
    assert np.allclose(imu_a.accel, imu_b.accel, atol=1e-9)
    assert np.array_equal(imu_a.gyro, imu_b.gyro)
    # the same body-frame stream yields bit-identical terms wherever it was recorded
    p1 = preintegrate(imu_a.t, imu_a.accel, imu_a.gyro)
    p2 = preintegrate(imu_a.t.copy(), imu_a.accel.copy(), imu_a.gyro.copy())
    assert np.array_equal(p1.alpha, p2.alpha) and np.array_equal(p1.gamma, p2.gamma)
