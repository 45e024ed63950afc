"""Residual blocks of the sliding-window cost and the robust loss.

Every vectorized residual returns raw (unweighted) residuals and Jacobians;
weights and robust scaling are applied by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .state import RobotState


class SingularGeometryError(ValueError):
    """Raised when a residual Jacobian is undefined at the evaluation point."""


class MarginalizationError(RuntimeError):
    pass


# ---------------------------------------------------------------- robust loss

def pseudo_huber(q, delta):
    """``rho(q) = delta^2 (sqrt(1 + (q/delta)^2) - 1)`` and ``d rho / d q``."""
    q = np.asarray(q, dtype=float)
    s = np.sqrt(1.0 + (q / delta) ** 2)
    return delta * delta * (s - 1.0), q / s


def robust_weight(q, delta):
    """IRLS weight ``rho'(q) / q``, equal to 1 at ``q = 0``."""
    q = np.asarray(q, dtype=float)
    return 1.0 / np.sqrt(1.0 + (q / delta) ** 2)


@dataclass
class AnchorEstimate:
    position: np.ndarray
    fixed: bool = False
    covariance: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).copy()

    def fix(self):
        self.fixed = True
        self.position.setflags(write=False)


# ---------------------------------------------------------------- UWB

def uwb_range_residual(p, anchor, measured, gamma_r=1.0):
    """Predicted minus measured range, scaled by ``sqrt(gamma_r)``.

    Returns ``(r, J_p, J_anchor)``.
    """
    diff = np.asarray(p, dtype=float) - np.asarray(anchor, dtype=float)
    dist = np.linalg.norm(diff)
    if dist < 1e-6:
        raise SingularGeometryError("position coincides with the anchor; range Jacobian undefined")
    d = measured.distance if hasattr(measured, "distance") else float(measured)
    w = np.sqrt(gamma_r)
    u = diff / dist
    return w * (dist - d), w * u, -w * u


def range_residuals(P, anchor, d):
    """Vectorized raw ranging residuals for positions ``P`` (n, 3).

    Rows whose position coincides with the anchor get a zero Jacobian.
    """
    diff = P - anchor
    dist = np.linalg.norm(diff, axis=1)
    safe = np.where(dist < 1e-6, 1.0, dist)
    u = diff / safe[:, None]
    u[dist < 1e-6] = 0.0
    return dist - d, u


def relative_link_residual(p_t, p_j, z, gamma_s=1.0):
    """``((p_j - p_t) - z) * sqrt(gamma_s)`` with Jacobians ``-w I`` and ``w I``."""
    w = np.sqrt(gamma_s)
    r = w * ((np.asarray(p_j, dtype=float) - np.asarray(p_t, dtype=float)) - np.asarray(z, dtype=float))
    return r, -w * np.eye(3), w * np.eye(3)


# ---------------------------------------------------------------- vision

@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    R_bc: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_bc: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_camera(cls, cam):
        return cls(cam.fx, cam.fy, cam.cx, cam.cy, np.asarray(cam.body_from_cam, dtype=float),
                   np.asarray(cam.body_from_cam_t, dtype=float))

    def bearing(self, uv):
        uv = np.atleast_2d(uv)
        return np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy,
                         np.ones(len(uv))], axis=1)


def vision_residuals(Ri, pi, Rj, pj, inv_depth, uv_first, uv_cur, K: Intrinsics):
    """Batched inverse-depth reprojection residuals ``pi(P_cj) - uv_cur``.

    ``Ri``/``Rj`` are (n, 3, 3) world-from-body rotations of the anchor and
    observing frames, ``pi``/``pj`` their positions. Returns
    ``(r (n,2), J_pi, J_thi, J_pj, J_thj (n,2,3), J_l (n,2), valid (n,))``.
    Rows with the point behind camera ``j`` or a non-positive inverse depth are
    flagged invalid.
    """
    f = K.bearing(uv_first)
    lam = np.asarray(inv_depth, dtype=float)
    lam_safe = np.where(lam > 1e-9, lam, 1e-9)
    P_ci = f / lam_safe[:, None]
    Q = P_ci @ K.R_bc.T + K.t_bc  # point in body i
    P_w = np.einsum("nij,nj->ni", Ri, Q) + pi
    P_bj = np.einsum("nji,nj->ni", Rj, P_w - pj)
    P_cj = (P_bj - K.t_bc) @ K.R_bc
    X, Y, Z = P_cj[:, 0], P_cj[:, 1], P_cj[:, 2]
    valid = (Z > 1e-3) & (lam > 1e-9)
    Zs = np.where(valid, Z, 1.0)
    r = np.stack([K.fx * X / Zs + K.cx, K.fy * Y / Zs + K.cy], axis=1) - uv_cur

    n = len(lam)
    d_proj = np.zeros((n, 2, 3))
    d_proj[:, 0, 0] = K.fx / Zs
    d_proj[:, 0, 2] = -K.fx * X / (Zs * Zs)
    d_proj[:, 1, 1] = K.fy / Zs
    d_proj[:, 1, 2] = -K.fy * Y / (Zs * Zs)
    # d P_cj / d P_bj = R_bc^T ; d P_bj / d P_w = Rj^T
    d_bj = d_proj @ K.R_bc.T  # (n,2,3)
    d_w = np.einsum("nak,njk->naj", d_bj, Rj)  # d_bj @ Rj^T

    J_pj = -d_w
    J_thj = d_bj @ _batch_skew(P_bj)
    J_pi = d_w
    J_thi = -np.einsum("nak,nkm->nam", d_w, Ri @ _batch_skew(Q))
    dQ_dl = -(f / (lam_safe * lam_safe)[:, None]) @ K.R_bc.T
    J_l = np.einsum("nak,nk->na", d_w, np.einsum("nij,nj->ni", Ri, dQ_dl))
    return r, J_pi, J_thi, J_pj, J_thj, J_l, valid


def vision_residual(pose_i: geom.Pose, pose_j: geom.Pose, inv_depth, first_uv, cur_uv, K: Intrinsics):
    """Single-observation wrapper around :func:`vision_residuals`.

    Returns ``(r, J_i, J_j, J_l)`` with ``J_i``/``J_j`` of shape (2, 6) over
    ``[dp, dtheta]`` of each body pose. Raises ``SingularGeometryError`` when
    the point is behind camera ``j``.
    """
    out = vision_residuals(pose_i.R[None], pose_i.translation[None], pose_j.R[None],
                           pose_j.translation[None], np.array([inv_depth]),
                           np.asarray(first_uv, dtype=float)[None], np.asarray(cur_uv, dtype=float)[None], K)
    r, J_pi, J_thi, J_pj, J_thj, J_l, valid = out
    if not valid[0]:
        raise SingularGeometryError("point is behind the observing camera")
    return r[0], np.hstack([J_pi[0], J_thi[0]]), np.hstack([J_pj[0], J_thj[0]]), J_l[0]


def _batch_skew(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


# ---------------------------------------------------------------- marginalization

def schur_marginalize(H, b, drop):
    """Eliminate the indices ``drop`` from the Gauss-Newton system ``H dx = -b``.

    ``b`` is the gradient ``J^T r``. Returns ``(H_m, b_m, keep)``.
    """
    n = H.shape[0]
    drop = np.asarray(sorted(set(int(i) for i in drop)), dtype=int)
    if len(drop) == 0:
        raise MarginalizationError("nothing to marginalize")
    keep = np.setdiff1d(np.arange(n), drop)
    if len(keep) == 0:
        raise MarginalizationError("cannot marginalize every variable")
    Hmm = H[np.ix_(drop, drop)]
    Hmm = 0.5 * (Hmm + Hmm.T)
    w, U = np.linalg.eigh(Hmm)
    tol = 1e-8 * max(1.0, w.max(initial=0.0))
    winv = np.where(w > tol, 1.0 / np.where(w > tol, w, 1.0), 0.0)
    Hmm_inv = (U * winv) @ U.T
    Hrm = H[np.ix_(keep, drop)]
    H_m = H[np.ix_(keep, keep)] - Hrm @ Hmm_inv @ Hrm.T
    b_m = b[keep] - Hrm @ Hmm_inv @ b[drop]
    return 0.5 * (H_m + H_m.T), b_m, keep


def factor_information(H, b, eps=1e-8):
    """Square-root factor ``(J, r0)`` with ``J^T J = H`` and ``J^T r0 = b``."""
    w, U = np.linalg.eigh(0.5 * (H + H.T))
    if w.size and w.min() < -1e-6 * max(1.0, abs(w).max()):
        raise MarginalizationError(f"reduced system is not positive semidefinite (min eig {w.min():.3e})")
    keep = w > eps * max(1.0, w.max(initial=0.0))
    s = np.sqrt(w[keep])
    J = s[:, None] * U[:, keep].T
    r0 = (U[:, keep].T @ b) / s
    return J, r0


@dataclass
class PriorFactor:
    """Linear Gaussian prior ``r = r0 + J (x [-] x0)`` over retained keyframe states.

    ``keys`` identifies the states (frame ids) in column order, each taking 15
    columns of ``J``.
    """

    keys: list
    x0: list  # RobotState linearization points
    J: np.ndarray
    r0: np.ndarray

    @classmethod
    def from_system(cls, keys, x0, H, b):
        J, r0 = factor_information(H, b)
        return cls(list(keys), [s.copy() for s in x0], J, r0)

    @classmethod
    def from_sigmas(cls, key, state: RobotState, sigmas):
        sp, sv, sth, sba, sbw = sigmas
        w = 1.0 / np.repeat([sp, sv, sth, sba, sbw], 3)
        return cls([key], [state.copy()], np.diag(w), np.zeros(15))

    def delta(self, states):
        return np.concatenate([s.boxminus(s0) for s, s0 in zip(states, self.x0)])

    def evaluate(self, states):
        """Residual and Jacobian with respect to the states' right tangents."""
        X = [np.array([getattr(s, a) for s in states]) for a in ("p", "v", "q", "b_a", "b_w")]
        return self.evaluate_arrays(*X)

    def evaluate_arrays(self, p, v, q, ba, bw):
        """:meth:`evaluate` on stacked state arrays (rows in ``keys`` order)."""
        x0 = self._x0_arrays()
        e = geom.quat_mul_n(geom.quat_conj_n(x0[2]), q)
        sign = np.where(e[:, 0] >= 0, 1.0, -1.0)
        dx = np.concatenate([p - x0[0], v - x0[1], 2.0 * sign[:, None] * e[:, 1:], ba - x0[3], bw - x0[4]],
                            axis=1).ravel()
        r = self.r0 + self.J @ dx
        J = self.J.copy()
        corr = sign[:, None, None] * geom.qleft_n(e)[:, 1:, 1:]
        for k in range(len(p)):
            o = 15 * k + 6
            J[:, o:o + 3] = self.J[:, o:o + 3] @ corr[k]
        return r, J

    def _x0_arrays(self):
        if getattr(self, "_x0_cache", None) is None:
            self._x0_cache = [np.array([getattr(s, a) for s in self.x0]) for a in ("p", "v", "q", "b_a", "b_w")]
        return self._x0_cache

    def information(self):
        return self.J.T @ self.J
