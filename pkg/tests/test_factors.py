import numpy as np
import pytest
from hypothesis import given, strategies as st

from rangevio import geom
from rangevio.config import CameraSpec, RobustLossSpec, UwbFactorSpec, ConfigError
from rangevio.factors import (AnchorEstimate, Intrinsics, MarginalizationError, PriorFactor, SingularGeometryError,
                              pseudo_huber, relative_link_residual, robust_weight, schur_marginalize,
                              uwb_range_residual, vision_residual, vision_residuals)
from rangevio.sim import RangeMeasurement
from conftest import numeric_jacobian, random_quat, random_state, rel_err


# ---------------------------------------------------------------- robust loss

def test_pseudo_huber_values():
    assert pseudo_huber(0.0, 0.1)[0] == 0.0
    assert abs(pseudo_huber(0.1, 0.1)[0] - 0.01 * (np.sqrt(2) - 1)) < 1e-12
    assert abs(pseudo_huber(0.1, 0.1)[0] - 0.0041421) < 1e-7
    big = pseudo_huber(10.0, 0.1)[0]
    assert abs(big - 0.99) / 0.99 < 0.01


@given(st.floats(-50, 50), st.floats(0.01, 5))
def test_pseudo_huber_properties(q, delta):
    rho, drho = pseudo_huber(q, delta)
    assert rho <= 0.5 * q * q + 1e-12
    # strictly below the quadratic once the quartic term is representable
    if abs(q) > 1e-2 * delta:
        assert rho < 0.5 * q * q
    assert abs(rho - pseudo_huber(-q, delta)[0]) < 1e-12
    # derivative matches the IRLS weight and finite differences
    assert abs(drho - robust_weight(q, delta) * q) < 1e-9
    h = 1e-6
    fd = (pseudo_huber(q + h, delta)[0] - pseudo_huber(q - h, delta)[0]) / (2 * h)
    assert abs(fd - drho) < 1e-5 * max(1.0, abs(drho))


@given(st.floats(0, 20), st.floats(0, 20), st.floats(0.01, 2))
def test_pseudo_huber_monotone(a, b, delta):
    lo, hi = sorted([a, b])
    assert pseudo_huber(lo, delta)[0] <= pseudo_huber(hi, delta)[0]


def test_spec_validation():
    with pytest.raises(ConfigError):
        RobustLossSpec(0.0)
    with pytest.raises(ConfigError):
        UwbFactorSpec(gamma_r=-1.0)
    with pytest.raises(ConfigError):
        UwbFactorSpec(link_horizon=0)


# ---------------------------------------------------------------- UWB

def test_uwb_residual_examples():
    r, Jp, Ja = uwb_range_residual([3, 4, 0], [0, 0, 0], RangeMeasurement(0.0, "anchor", 5.0))
    assert r == 0.0
    r, _, _ = uwb_range_residual([3, 4, 0], [0, 0, 0], 4.9)
    assert abs(r - 0.1) < 1e-12
    assert np.allclose(Jp, [0.6, 0.8, 0.0]) and np.allclose(Ja, -Jp)
    r, _, _ = uwb_range_residual([3, 4, 0], [0, 0, 0], 4.9, gamma_r=400.0)
    assert abs(r - 2.0) < 1e-9


def test_uwb_residual_singular():
    with pytest.raises(SingularGeometryError):
        uwb_range_residual([1.0, 1.0, 1.0], [1.0, 1.0, 1.0 + 1e-8], 0.0)


def test_uwb_jacobians_finite_difference():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        p, a = rng.uniform(-10, 10, 3), rng.uniform(-10, 10, 3)
        d = rng.uniform(0, 15)
        gamma = rng.uniform(1, 1000)
        _, Jp, Ja = uwb_range_residual(p, a, d, gamma)
        Np = numeric_jacobian(lambda x: uwb_range_residual(x, a, d, gamma)[0], p, 3)
        Na = numeric_jacobian(lambda x: uwb_range_residual(p, x, d, gamma)[0], a, 3)
        worst = max(worst, rel_err(Jp, Np[0]), rel_err(Ja, Na[0]))
    assert worst < 1e-7


def test_anchor_fix_is_immutable():
    a = AnchorEstimate([1.0, 2.0, 3.0])
    a.fix()
    with pytest.raises(ValueError):
        a.position[0] = 5.0
    assert a.fixed and np.array_equal(a.position, [1.0, 2.0, 3.0])


# ---------------------------------------------------------------- link

def test_link_residual_examples():
    r, _, _ = relative_link_residual([1, 1, 1], [2, 3, 4], [1, 2, 3])
    assert np.array_equal(r, np.zeros(3))
    r, _, _ = relative_link_residual([0, 0, 0], [1, 0, 0], [0.9, 0, 0])
    assert np.allclose(r, [0.1, 0, 0])
    r, Jt, Jj = relative_link_residual([0, 0, 0], [1, 0, 0], [0.9, 0, 0], gamma_s=100.0)
    assert np.allclose(r, [1.0, 0, 0]) and np.allclose(Jt, -10 * np.eye(3)) and np.allclose(Jj, 10 * np.eye(3))


def test_link_jacobians_finite_difference():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        pt, pj, z = rng.normal(0, 5, (3, 3))
        g = rng.uniform(1, 500)
        _, Jt, Jj = relative_link_residual(pt, pj, z, g)
        Nt = numeric_jacobian(lambda x: relative_link_residual(x, pj, z, g)[0], pt, 3)
        Nj = numeric_jacobian(lambda x: relative_link_residual(pt, x, z, g)[0], pj, 3)
        worst = max(worst, rel_err(Jt, Nt), rel_err(Jj, Nj))
    assert worst < 1e-5


# ---------------------------------------------------------------- vision

K = Intrinsics.from_camera(CameraSpec())


def _pose_plus(P, d):
    return geom.Pose(geom.quat_mul(P.rotation, geom.quat_exp(d[3:6])), P.translation + d[0:3])


def test_vision_identity_and_parallax():
    I = geom.Pose()
    # body +x is the optical axis; a point on the axis at 5 m
    uv0 = np.array([K.cx, K.cy])
    r, *_ = vision_residual(I, I, 1 / 5.0, uv0, uv0, K)
    assert np.allclose(r, 0.0)
    # moving camera j 0.1 m along body -y (image +u) shifts the point by f * 0.1 / 5 px
    moved = geom.Pose(geom.IDENTITY_QUAT, np.array([0.0, -0.1, 0.0]))
    r, *_ = vision_residual(I, moved, 1 / 5.0, uv0, uv0, K)
    assert np.allclose(np.abs(r), [K.fx * 0.1 / 5.0, 0.0], atol=1e-9)


def test_vision_behind_camera():
    I = geom.Pose()
    turned = geom.Pose(geom.yaw_quat(np.pi), np.zeros(3))
    uv0 = np.array([K.cx, K.cy])
    with pytest.raises(SingularGeometryError):
        vision_residual(I, turned, 0.2, uv0, uv0, K)
    out = vision_residuals(I.R[None], I.translation[None], turned.R[None], turned.translation[None],
                           np.array([0.2]), uv0[None], uv0[None], K)
    assert not out[-1][0]


def test_vision_jacobians_finite_difference():
    rng = np.random.default_rng(21)
    cam = CameraSpec(body_from_cam_t=(0.05, -0.02, 0.01))
    Kx = Intrinsics.from_camera(cam)
    worst, n = 0.0, 0
    while n < 100:
        Pi = geom.Pose(random_quat(rng), rng.uniform(-2, 2, 3))
        # landmark in front of camera i at 2..10 m
        uv1 = rng.uniform([50, 50], [590, 430])
        lam = 1.0 / rng.uniform(2, 10)
        Pj = _pose_plus(Pi, np.r_[rng.normal(0, 0.3, 3), rng.normal(0, 0.1, 3)])
        uv2 = uv1 + rng.normal(0, 3, 2)
        try:
            _, Ji, Jj, Jl = vision_residual(Pi, Pj, lam, uv1, uv2, Kx)
        except SingularGeometryError:
            continue
        f = lambda P, Q, l: vision_residual(P, Q, l, uv1, uv2, Kx)[0]
        Ni = numeric_jacobian(lambda P: f(P, Pj, lam), Pi, 6, _pose_plus)
        Nj = numeric_jacobian(lambda Q: f(Pi, Q, lam), Pj, 6, _pose_plus)
        Nl = numeric_jacobian(lambda l: f(Pi, Pj, l[0]), np.array([lam]), 1)[:, 0]
        worst = max(worst, rel_err(Ji, Ni), rel_err(Jj, Nj), rel_err(Jl, Nl))
        n += 1
    assert worst < 1e-5


# ---------------------------------------------------------------- marginalization

def _chain():
    """Three scalar positions: prior on x0, odometry x0->x1 and x1->x2."""
    A = np.array([[1.0, 0, 0], [-1.0, 1, 0], [0, -1.0, 1]])
    w = np.array([1 / 0.1, 1 / 0.2, 1 / 0.3])
    z = np.array([0.5, 1.2, 0.9])
    J = w[:, None] * A
    r0 = -w * z  # residual at x = 0
    return J.T @ J, J.T @ r0


def test_schur_chain_matches_full_solve():
    H, b = _chain()
    full = np.linalg.solve(H, -b)
    Hm, bm, keep = schur_marginalize(H, b, [0])
    reduced = np.linalg.solve(Hm, -bm)
    assert list(keep) == [1, 2]
    assert np.max(np.abs(reduced - full[keep])) < 1e-9


def test_schur_block_diagonal_untouched():
    H = np.diag([4.0, 2.0, 3.0])
    H[1, 2] = H[2, 1] = 0.5
    b = np.array([1.0, -1.0, 2.0])
    Hm, bm, keep = schur_marginalize(H, b, [0])
    assert np.array_equal(Hm, H[1:, 1:]) and np.array_equal(bm, b[1:])


def test_schur_everything_fails():
    H, b = _chain()
    with pytest.raises(MarginalizationError):
        schur_marginalize(H, b, [0, 1, 2])
    with pytest.raises(MarginalizationError):
        schur_marginalize(H, b, [])


def test_prior_factor_reproduces_marginal():
    H, b = _chain()
    Hm, bm, _ = schur_marginalize(H, b, [0])
    from rangevio.factors import factor_information

    J, r0 = factor_information(Hm, bm)
    assert np.allclose(J.T @ J, Hm) and np.allclose(J.T @ r0, bm)


def test_prior_factor_jacobian():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        x0 = [random_state(rng), random_state(rng)]
        M = rng.standard_normal((30, 30))
        H = M.T @ M
        prior = PriorFactor.from_system([0, 1], x0, H, rng.standard_normal(30))
        xs = [s.boxplus(rng.normal(0, 0.1, 15)) for s in x0]
        _, J = prior.evaluate(xs)

        def f(dx):
            return prior.evaluate([xs[0].boxplus(dx[:15]), xs[1].boxplus(dx[15:])])[0]

        N = numeric_jacobian(f, np.zeros(30), 30)
        worst = max(worst, rel_err(J, N))
    assert worst < 1e-5
