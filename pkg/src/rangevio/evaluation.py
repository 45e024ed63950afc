"""Trajectory metrics: aligned ATE, start-to-end error and relative improvement."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .io import Trajectory


class AlignmentError(ValueError):
    pass


def associate(t_est, t_gt, max_dt=0.02):
    """Nearest-stamp pairs ``(i_est, i_gt)`` within ``max_dt`` seconds."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    if len(t_gt) == 0 or len(t_est) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    j = np.clip(np.searchsorted(t_gt, t_est), 1, len(t_gt) - 1) if len(t_gt) > 1 else np.zeros(len(t_est), int)
    if len(t_gt) > 1:
        left = np.abs(t_est - t_gt[j - 1]) <= np.abs(t_gt[j] - t_est)
        j = np.where(left, j - 1, j)
    ok = np.abs(t_gt[j] - t_est) <= max_dt
    return np.flatnonzero(ok), j[ok]


def umeyama(src, dst, yaw_only=False):
    """Rigid ``(R, t)`` minimizing ``sum |R src_i + t - dst_i|^2`` (no scale).

    With ``yaw_only`` the rotation is restricted to the z axis (4-DOF), the
    natural gauge of visual-inertial odometry.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    X, Y = src - mu_s, dst - mu_d
    if yaw_only:
        C = X[:, :2].T @ Y[:, :2]
        yaw = np.arctan2(C[0, 1] - C[1, 0], C[0, 0] + C[1, 1])
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    else:
        U, _, Vt = np.linalg.svd(Y.T @ X)
        D = np.eye(3)
        D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
        R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def compute_ate(est: Trajectory, gt: Trajectory, align="se3", max_dt=0.02):
    """RMSE of position error after rigid alignment.

    ``align`` is ``"se3"``, ``"4dof"`` or ``"none"``. Returns ``(rmse, aligned
    positions, (R, t))``.
    """
    ie, ig = associate(est.t, gt.t, max_dt)
    if len(ie) < 3:
        raise AlignmentError(f"only {len(ie)} associated poses; need at least 3")
    P, G = est.p[ie], gt.p[ig]
    if align == "none":
        R, t = np.eye(3), np.zeros(3)
    elif align in ("se3", "4dof"):
        R, t = umeyama(P, G, yaw_only=(align == "4dof"))
    else:
        raise ValueError(f"unknown alignment {align!r}")
    aligned = P @ R.T + t
    err = np.linalg.norm(aligned - G, axis=1)
    return float(np.sqrt(np.mean(err ** 2))), aligned, (R, t)


def start_to_end_error(traj):
    """Raw (unaligned) gap between the last and first position of a loop.

    ``traj`` is a :class:`Trajectory` or directly the endpoint offset
    ``last - first``. Returns ``(horizontal, 3D, endpoint)``.
    """
    if isinstance(traj, Trajectory):
        if len(traj) < 2:
            raise ValueError("start-to-end error needs at least two poses")
        d = traj.p[-1] - traj.p[0]
    else:
        d = np.asarray(traj, dtype=float).reshape(3)
    return float(np.linalg.norm(d[:2])), float(np.linalg.norm(d)), d


def improvement_pct(baseline, ours):
    """Relative reduction of an error metric, in percent."""
    if baseline <= 0:
        raise ValueError("baseline error must be positive")
    return 100.0 * (baseline - ours) / baseline


@dataclass
class EvalReport:
    ate_rmse: float
    start_to_end_2d: float
    start_to_end_3d: float
    endpoint: list
    improvement_vs_baseline: float | None = None
    baseline_ate_rmse: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def evaluate(est: Trajectory, gt: Trajectory, baseline: Trajectory | None = None, align="se3") -> EvalReport:
    """ATE and loop-closure metrics; the endpoint is taken relative to the estimate's first pose."""
    ate, _, _ = compute_ate(est, gt, align)
    e2, e3, end = start_to_end_error(est)
    rep = EvalReport(ate, e2, e3, [float(x) for x in end])
    if baseline is not None:
        b, _, _ = compute_ate(baseline, gt, align)
        rep.baseline_ate_rmse = b
        rep.improvement_vs_baseline = improvement_pct(b, ate) if b > 0 else None
    return rep
