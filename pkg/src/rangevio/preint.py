"""IMU preintegration between camera frames and the 15-dim IMU residual.

Preintegrated terms are expressed in the body frame of the first sample:
``alpha`` (position), ``beta`` (velocity) and ``gamma`` (rotation, body_k from
body_t). Gravity is not removed here; it enters only in the residual.
Error-state ordering everywhere is ``[alpha, beta, theta, b_a, b_w]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geom
from .state import RobotState

A, B, TH, BA, BW = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)
I3 = np.eye(3)


@dataclass(frozen=True)
class ImuNoise:
    accel_noise_density: float = 0.02
    gyro_noise_density: float = 0.002
    accel_bias_walk: float = 1e-3
    gyro_bias_walk: float = 1e-4


@dataclass(frozen=True)
class PreintegratedImu:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    dt_total: float
    bias_a: np.ndarray
    bias_w: np.ndarray
    covariance: np.ndarray
    jacobian: np.ndarray  # d(alpha, beta, theta) / d(b_a, b_w) live in its columns 9:15
    t: np.ndarray = field(repr=False)
    accel: np.ndarray = field(repr=False)
    gyro: np.ndarray = field(repr=False)
    noise: ImuNoise = ImuNoise()

    @property
    def t0(self):
        return float(self.t[0])

    @property
    def t1(self):
        return float(self.t[-1])

    def sqrt_information(self):
        """Upper-triangular ``L`` with ``L.T @ L == inv(covariance)``."""
        P = 0.5 * (self.covariance + self.covariance.T)
        P = P + 1e-14 * np.eye(15)
        info = np.linalg.inv(P)
        info = 0.5 * (info + info.T)
        return np.linalg.cholesky(info).T


def _midpoint_terms(t, accel, gyro, ba, bw):
    """Per-interval midpoint quantities, vectorized over the samples."""
    dt = np.diff(t)
    w_mid = 0.5 * (gyro[:-1] + gyro[1:]) - bw
    dq = geom.quat_exp_n(w_mid * dt[:, None])
    gam = np.empty((len(t), 4))
    gam[0] = geom.IDENTITY_QUAT
    for k in range(len(dt)):
        gam[k + 1] = geom.quat_mul(gam[k], dq[k])
    R = geom.quat_to_rot_n(gam)
    acc = 0.5 * (np.einsum("nij,nj->ni", R[:-1], accel[:-1] - ba) + np.einsum("nij,nj->ni", R[1:], accel[1:] - ba))
    return dt, w_mid, gam, R, acc


def preintegrate(t, accel, gyro, bias_a=None, bias_w=None, noise: ImuNoise = ImuNoise()) -> PreintegratedImu:
    """Midpoint preintegration over samples ``t[0]..t[-1]`` (both endpoints included).

    Also propagates the 15x15 error covariance and the bias Jacobians.
    """
    t = np.asarray(t, dtype=float)
    accel = np.asarray(accel, dtype=float).reshape(-1, 3)
    gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
    if len(t) < 1:
        raise ValueError("preintegration needs at least one IMU sample")
    if np.any(np.diff(t) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    ba = np.zeros(3) if bias_a is None else np.asarray(bias_a, dtype=float)
    bw = np.zeros(3) if bias_w is None else np.asarray(bias_w, dtype=float)

    dt, w_mid, gam, R, acc = _midpoint_terms(t, accel, gyro, ba, bw)
    n = len(dt)
    dv = acc * dt[:, None]
    beta_prev = np.cumsum(dv, axis=0) - dv
    alpha = np.sum(beta_prev * dt[:, None] + 0.5 * dv * dt[:, None], axis=0)
    beta = np.sum(dv, axis=0)

    R0, R1 = R[:-1], R[1:]
    d1 = dt[:, None, None]
    d2 = d1 * d1
    a0x = geom.skew_n(accel[:-1] - ba)
    a1x = geom.skew_n(accel[1:] - ba)
    Iw = I3 - geom.skew_n(w_mid) * d1
    R1a1x = R1 @ a1x
    M = R0 @ a0x + R1a1x @ Iw
    F = np.broadcast_to(np.eye(15), (n, 15, 15)).copy()
    F[:, A, TH] = -0.25 * d2 * M
    F[:, A, B] = I3 * d1
    F[:, A, BA] = -0.25 * (R0 + R1) * d2
    F[:, A, BW] = 0.25 * R1a1x * d2 * d1
    F[:, TH, TH] = Iw
    F[:, TH, BW] = -I3 * d1
    F[:, B, TH] = -0.5 * d1 * M
    F[:, B, BA] = -0.5 * (R0 + R1) * d1
    F[:, B, BW] = 0.5 * R1a1x * d2

    # noise columns: a0, w0, a1, w1, bias_a walk, bias_w walk
    V = np.zeros((n, 15, 18))
    V[:, A, 0:3] = 0.25 * R0 * d2
    V[:, A, 3:6] = -0.125 * R1a1x * d2 * d1
    V[:, A, 6:9] = 0.25 * R1 * d2
    V[:, A, 9:12] = V[:, A, 3:6]
    V[:, TH, 3:6] = 0.5 * I3 * d1
    V[:, TH, 9:12] = 0.5 * I3 * d1
    V[:, B, 0:3] = 0.5 * R0 * d1
    V[:, B, 3:6] = -0.25 * R1a1x * d2
    V[:, B, 6:9] = 0.5 * R1 * d1
    V[:, B, 9:12] = V[:, B, 3:6]
    V[:, BA, 12:15] = I3 * d1
    V[:, BW, 15:18] = I3 * d1
    dens = np.repeat([noise.accel_noise_density ** 2, noise.gyro_noise_density ** 2,
                      noise.accel_noise_density ** 2, noise.gyro_noise_density ** 2,
                      noise.accel_bias_walk ** 2, noise.gyro_bias_walk ** 2], 3)
    Q = (V * (dens / d1)) @ np.swapaxes(V, 1, 2)

    P = np.zeros((15, 15))
    J = np.eye(15)
    for k in range(n):
        P = F[k] @ P @ F[k].T + Q[k]
        J = F[k] @ J
    P = 0.5 * (P + P.T)
    return PreintegratedImu(alpha, beta, gam[-1].copy(), float(np.sum(dt)), ba.copy(), bw.copy(), P, J,
                            t.copy(), accel.copy(), gyro.copy(), noise)


def repreintegrate(pre: PreintegratedImu, bias_a, bias_w) -> PreintegratedImu:
    return preintegrate(pre.t, pre.accel, pre.gyro, bias_a, bias_w, pre.noise)


def merge(first: PreintegratedImu, second: PreintegratedImu) -> PreintegratedImu:
    """Preintegration over the concatenated interval, with ``first``'s bias."""
    if abs(first.t1 - second.t0) > 1e-9:
        raise ValueError("preintegration intervals are not contiguous")
    t = np.concatenate([first.t, second.t[1:]])
    acc = np.vstack([first.accel, second.accel[1:]])
    gyr = np.vstack([first.gyro, second.gyro[1:]])
    return preintegrate(t, acc, gyr, first.bias_a, first.bias_w, first.noise)


def corrected_terms(pre: PreintegratedImu, bias_a, bias_w):
    """First-order bias correction of ``(alpha, beta, gamma)``."""
    dba = np.asarray(bias_a, dtype=float) - pre.bias_a
    dbw = np.asarray(bias_w, dtype=float) - pre.bias_w
    J = pre.jacobian
    alpha = pre.alpha + J[A, BA] @ dba + J[A, BW] @ dbw
    beta = pre.beta + J[B, BA] @ dba + J[B, BW] @ dbw
    gamma = geom.quat_mul(pre.gamma, geom.quat_exp(J[TH, BW] @ dbw))
    return alpha, beta, gamma


def bias_correct(pre: PreintegratedImu, bias_a, bias_w, threshold=1e-2) -> PreintegratedImu:
    """Move the bias linearization point, re-integrating if the change is large."""
    dba = np.asarray(bias_a, dtype=float) - pre.bias_a
    dbw = np.asarray(bias_w, dtype=float) - pre.bias_w
    if np.linalg.norm(np.concatenate([dba, dbw])) > threshold:
        return repreintegrate(pre, bias_a, bias_w)
    alpha, beta, gamma = corrected_terms(pre, bias_a, bias_w)
    return replace(pre, alpha=alpha, beta=beta, gamma=gamma,
                   bias_a=np.asarray(bias_a, dtype=float).copy(), bias_w=np.asarray(bias_w, dtype=float).copy())


def predict(state: RobotState, pre: PreintegratedImu, gravity) -> RobotState:
    """Dead-reckon ``state`` across ``pre`` using its current bias estimate."""
    g = np.asarray(gravity, dtype=float)
    alpha, beta, gamma = corrected_terms(pre, state.b_a, state.b_w)
    R = state.R
    dt = pre.dt_total
    return RobotState(state.p + state.v * dt + 0.5 * g * dt * dt + R @ alpha,
                      state.v + g * dt + R @ beta,
                      geom.quat_mul(state.q, gamma), state.b_a, state.b_w, state.stamp + dt)


def imu_residual(si: RobotState, sj: RobotState, pre: PreintegratedImu, gravity, sqrt_info=None,
                 jacobians=True):
    """Residual ``[d_alpha, d_beta, d_theta, d_b_a, d_b_w]`` and its Jacobians.

    ``gravity`` is the gravitational acceleration in the world frame, e.g.
    ``(0, 0, -9.81)``. Returns ``(r, J_i, J_j)`` where the Jacobians are taken
    with respect to the 15-dim tangents of ``si`` and ``sj``. When ``sqrt_info``
    is given, residual and Jacobians are pre-multiplied by it. With
    ``jacobians=False`` only the residual is computed.
    """
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    J = pre.jacobian
    dba = si.b_a - pre.bias_a
    dbw = si.b_w - pre.bias_w
    alpha = pre.alpha + J[A, BA] @ dba + J[A, BW] @ dbw
    beta = pre.beta + J[B, BA] @ dba + J[B, BW] @ dbw
    phi = J[TH, BW] @ dbw
    gamma = geom.quat_mul(pre.gamma, geom.quat_exp(phi))

    Ri_T = si.R.T
    dp_w = sj.p - si.p - si.v * dt - 0.5 * g * dt * dt
    dv_w = sj.v - si.v - g * dt
    q_ij = geom.quat_mul(geom.quat_conj(si.q), sj.q)
    err_q = geom.quat_mul(geom.quat_conj(gamma), q_ij)
    sign = 1.0 if err_q[0] >= 0 else -1.0

    r = np.empty(15)
    r[A] = Ri_T @ dp_w - alpha
    r[B] = Ri_T @ dv_w - beta
    r[TH] = 2.0 * sign * err_q[1:]
    r[BA] = sj.b_a - si.b_a
    r[BW] = sj.b_w - si.b_w
    if not jacobians:
        return (r if sqrt_info is None else sqrt_info @ r), None, None

    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    Ji[A, 0:3] = -Ri_T
    Ji[A, 3:6] = -Ri_T * dt
    Ji[A, 6:9] = geom.skew(Ri_T @ dp_w)
    Ji[A, 9:12] = -J[A, BA]
    Ji[A, 12:15] = -J[A, BW]
    Ji[B, 3:6] = -Ri_T
    Ji[B, 6:9] = geom.skew(Ri_T @ dv_w)
    Ji[B, 9:12] = -J[B, BA]
    Ji[B, 12:15] = -J[B, BW]
    # q_i -> q_i exp(d): err = gamma^-1 * exp(-d) * q_ij
    Ji[TH, 6:9] = -sign * (geom.qleft(geom.quat_conj(gamma)) @ geom.qright(q_ij))[1:, 1:]
    # gamma(b_w + e) = gamma * exp(Jr(phi) J_th_bw e)
    Ji[TH, 12:15] = -sign * geom.qright(err_q)[1:, 1:] @ geom.so3_right_jacobian(phi) @ J[TH, BW]
    Ji[BA, 9:12] = -I3
    Ji[BW, 12:15] = -I3

    Jj[A, 0:3] = Ri_T
    Jj[B, 3:6] = Ri_T
    Jj[TH, 6:9] = sign * geom.qleft(err_q)[1:, 1:]
    Jj[BA, 9:12] = I3
    Jj[BW, 12:15] = I3

    if sqrt_info is not None:
        r = sqrt_info @ r
        Ji = sqrt_info @ Ji
        Jj = sqrt_info @ Jj
    return r, Ji, Jj


@dataclass(frozen=True)
class ImuBatch:
    """Preintegration terms of several consecutive frame pairs stacked for vectorized evaluation."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    dt: np.ndarray
    bias_a: np.ndarray
    bias_w: np.ndarray
    jacobian: np.ndarray
    sqrt_info: np.ndarray

    @classmethod
    def stack(cls, pres, sqrt_infos=None):
        if sqrt_infos is None:
            sqrt_infos = [p.sqrt_information() for p in pres]
        return cls(np.array([p.alpha for p in pres]), np.array([p.beta for p in pres]),
                   np.array([p.gamma for p in pres]), np.array([p.dt_total for p in pres]),
                   np.array([p.bias_a for p in pres]), np.array([p.bias_w for p in pres]),
                   np.array([p.jacobian for p in pres]), np.array(sqrt_infos))


def imu_residuals(xi, xj, batch: ImuBatch, gravity, jacobians=True):
    """Vectorized, whitened :func:`imu_residual` over stacked state pairs.

    ``xi``/``xj`` are tuples ``(p, v, q, b_a, b_w)`` of arrays with one row per
    pair. Returns ``(r (m,15), J_i (m,15,15), J_j (m,15,15))``.
    """
    pi, vi, qi, bai, bwi = xi
    pj, vj, qj, baj, bwj = xj
    g = np.asarray(gravity, dtype=float)
    m = len(pi)
    dt = batch.dt[:, None]
    J = batch.jacobian
    dba = bai - batch.bias_a
    dbw = bwi - batch.bias_w
    mv = lambda M, x: np.einsum("nij,nj->ni", M, x)
    alpha = batch.alpha + mv(J[:, A, BA], dba) + mv(J[:, A, BW], dbw)
    beta = batch.beta + mv(J[:, B, BA], dba) + mv(J[:, B, BW], dbw)
    phi = mv(J[:, TH, BW], dbw)
    gamma = geom.quat_mul_n(batch.gamma, geom.quat_exp_n(phi))

    Ri = geom.quat_to_rot_n(qi)
    dp_w = pj - pi - vi * dt - 0.5 * g * dt * dt
    dv_w = vj - vi - g * dt
    dp_b = np.einsum("nji,nj->ni", Ri, dp_w)
    dv_b = np.einsum("nji,nj->ni", Ri, dv_w)
    q_ij = geom.quat_mul_n(geom.quat_conj_n(qi), qj)
    err_q = geom.quat_mul_n(geom.quat_conj_n(gamma), q_ij)
    sign = np.where(err_q[:, 0] >= 0, 1.0, -1.0)

    r = np.concatenate([dp_b - alpha, dv_b - beta, 2.0 * sign[:, None] * err_q[:, 1:],
                        baj - bai, bwj - bwi], axis=1)
    L = batch.sqrt_info
    r = mv(L, r)
    if not jacobians:
        return r, None, None

    RiT = np.swapaxes(Ri, 1, 2)
    Ji = np.zeros((m, 15, 15))
    Jj = np.zeros((m, 15, 15))
    Ji[:, A, 0:3] = -RiT
    Ji[:, A, 3:6] = -RiT * dt[:, :, None]
    Ji[:, A, 6:9] = geom.skew_n(dp_b)
    Ji[:, A, 9:12] = -J[:, A, BA]
    Ji[:, A, 12:15] = -J[:, A, BW]
    Ji[:, B, 3:6] = -RiT
    Ji[:, B, 6:9] = geom.skew_n(dv_b)
    Ji[:, B, 9:12] = -J[:, B, BA]
    Ji[:, B, 12:15] = -J[:, B, BW]
    s3 = sign[:, None, None]
    Ji[:, TH, 6:9] = -s3 * (geom.qleft_n(geom.quat_conj_n(gamma)) @ geom.qright_n(q_ij))[:, 1:, 1:]
    Ji[:, TH, 12:15] = -s3 * geom.qright_n(err_q)[:, 1:, 1:] @ geom.so3_right_jacobian_n(phi) @ J[:, TH, BW]
    Ji[:, BA, 9:12] = -I3
    Ji[:, BW, 12:15] = -I3
    Jj[:, A, 0:3] = RiT
    Jj[:, B, 3:6] = RiT
    Jj[:, TH, 6:9] = s3 * geom.qleft_n(err_q)[:, 1:, 1:]
    Jj[:, BA, 9:12] = I3
    Jj[:, BW, 12:15] = I3
    return r, L @ Ji, L @ Jj
