"""Rotation, quaternion and rigid-transform helpers.

Conventions used everywhere in the package:

* Quaternions are Hamilton, stored as numpy arrays ``[w, x, y, z]``.
* An orientation ``q`` maps body vectors into the world frame, ``v_w = R(q) v_b``.
* Tangent perturbations are applied on the right, ``q <- q * exp(dtheta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_mul(a, b):
    """Hamilton product ``a * b`` (renormalized)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    out = np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])
    return out / np.sqrt(out @ out)


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


quat_inv = quat_conj


def quat_to_rot(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(R):
    """Shepperd's method; returns the representative with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return normalize(q)


def rotate(q, v):
    return quat_to_rot(q) @ np.asarray(v, dtype=float)


def skew(w):
    """Cross-product matrix, ``skew(a) @ b == cross(a, b)``."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def omega_matrix(w):
    """4x4 rate matrix for quaternion kinematics in vector-first layout.

    With ``q`` laid out as ``[x, y, z, w]``, ``0.5 * omega_matrix(w) @ q`` is the
    time derivative of ``q`` under body rate ``w``, i.e. ``0.5 * q * (0, w)``.
    """
    w = np.asarray(w, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = -skew(w)
    out[:3, 3] = w
    out[3, :3] = -w
    return out


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt(phi @ phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1 - np.cos(theta)) / theta**2 * K @ K)


def so3_right_jacobian(phi):
    """Right Jacobian of SO(3): ``exp(phi + d) ~= exp(phi) exp(Jr(phi) d)``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt(phi @ phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - (1 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


def quat_exp(phi):
    """Unit quaternion of the rotation vector ``phi`` (rad)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.sqrt(phi @ phi)
    if theta < 1e-12:
        out = np.array([1.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
        return out / np.linalg.norm(out)
    s = np.sin(0.5 * theta) / theta
    return np.array([np.cos(0.5 * theta), s * phi[0], s * phi[1], s * phi[2]])


def quat_log(q):
    q = normalize(q)
    if q[0] < 0:
        q = -q
    v = q[1:]
    n = np.linalg.norm(v)
    if n < 1e-12:
        return 2.0 * v
    return 2.0 * np.arctan2(n, q[0]) * v / n


def quat_boxminus(a, b):
    """Small-angle difference ``a [-] b = 2 vec(b^-1 * a)`` (rad).

    The sign is canonicalized so the error quaternion has ``w >= 0``.
    """
    e = quat_mul(quat_conj(b), a)
    if e[0] < 0:
        e = -e
    return 2.0 * e[1:]


def quat_boxplus(b, delta):
    """Inverse of :func:`quat_boxminus`: ``b * (sqrt(1 - |delta/2|^2), delta/2)``."""
    half = 0.5 * np.asarray(delta, dtype=float)
    w = np.sqrt(max(0.0, 1.0 - half @ half))
    return quat_mul(b, np.array([w, *half]))


def qleft(q):
    """Matrix ``L(q)`` with ``q * p == L(q) @ p`` for ``[w, x, y, z]`` layout."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def qright(q):
    """Matrix ``Rm(q)`` with ``p * q == Rm(q) @ p``."""
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]])


def yaw_quat(yaw):
    return np.array([np.cos(0.5 * yaw), 0.0, 0.0, np.sin(0.5 * yaw)])


def euler_zyx_to_quat(yaw, pitch, roll):
    return quat_mul(quat_mul(yaw_quat(yaw), np.array([np.cos(0.5 * pitch), 0.0, np.sin(0.5 * pitch), 0.0])),
                    np.array([np.cos(0.5 * roll), np.sin(0.5 * roll), 0.0, 0.0]))


@dataclass
class Pose:
    """Rigid transform ``x -> R(rotation) x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = normalize(self.rotation)
        self.translation = np.asarray(self.translation, dtype=float)

    @property
    def R(self):
        return quat_to_rot(self.rotation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.rotation, other.rotation),
                    self.translation + rotate(self.rotation, other.translation))

    def inverse(self) -> "Pose":
        qi = quat_conj(self.rotation)
        return Pose(qi, -rotate(qi, self.translation))

    def apply(self, v):
        return self.R @ np.asarray(v, dtype=float) + self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T


# ---------------------------------------------------------------- batched versions
# Same conventions as above on stacks of shape (n, 4) / (n, 3).

def quat_mul_n(a, b):
    aw, ax, ay, az = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bw, bx, by, bz = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    out = np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=1)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def quat_conj_n(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_rot_n(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_exp_n(phi):
    theta = np.linalg.norm(phi, axis=1)
    small = theta < 1e-12
    ts = np.where(small, 1.0, theta)
    s = np.where(small, 0.5, np.sin(0.5 * ts) / ts)
    out = np.concatenate([np.where(small, 1.0, np.cos(0.5 * ts))[:, None], s[:, None] * phi], axis=1)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def skew_n(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def qleft_n(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([np.stack([w, -x, -y, -z], 1), np.stack([x, w, -z, y], 1),
                     np.stack([y, z, w, -x], 1), np.stack([z, -y, x, w], 1)], axis=1)


def qright_n(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([np.stack([w, -x, -y, -z], 1), np.stack([x, w, z, -y], 1),
                     np.stack([y, -z, w, x], 1), np.stack([z, y, -x, w], 1)], axis=1)


def so3_right_jacobian_n(phi):
    theta = np.linalg.norm(phi, axis=1)
    K = skew_n(phi)
    KK = K @ K
    small = theta < 1e-6
    ts = np.where(small, 1.0, theta)
    c1 = np.where(small, 0.5, (1 - np.cos(ts)) / ts ** 2)
    c2 = np.where(small, 1.0 / 6.0, (ts - np.sin(ts)) / ts ** 3)
    return np.eye(3) - c1[:, None, None] * K + c2[:, None, None] * KK
