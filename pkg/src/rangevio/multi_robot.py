"""Inter-robot frame transform from a shared anchor and two rendezvous ranges.

Both robots share the gravity direction, so the transform from robot i's world
frame into robot j's is a yaw rotation plus a translation. The z offset comes
straight from the two anchor estimates; yaw and the horizontal offset follow
from one range (two candidate solutions) and a second range picks between them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import geom
from .io import Trajectory


class TransformError(ValueError):
    pass


class InconsistentMeasurementsError(TransformError):
    """No yaw reproduces the first range, even allowing for noise."""


class AmbiguousGeometryError(TransformError):
    """Both candidate intersections are consistent with the second range."""


class DegenerateMotionError(TransformError):
    """The two observations carry the same relative geometry."""


class NotReadyError(RuntimeError):
    """The anchor is not fixed yet, so nothing can be sent."""


@dataclass(frozen=True)
class RendezvousObservation:
    """One exchange: own position and anchor (own frame), peer's (peer frame), range."""

    t: float
    own_position: np.ndarray
    peer_position: np.ndarray
    peer_anchor: np.ndarray
    own_anchor: np.ndarray
    range: float

    def __post_init__(self):
        for name in ("own_position", "peer_position", "peer_anchor", "own_anchor"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if not self.range >= 0:
            raise ValueError("range must be non-negative")


@dataclass(frozen=True)
class FrameTransform:
    """``x_peer = R(yaw) x_own + t`` with ``R`` a rotation about z."""

    yaw: float
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @property
    def R(self):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def inverse(self) -> "FrameTransform":
        return FrameTransform(-self.yaw, -(self.R.T @ self.t))

    def compose(self, other: "FrameTransform") -> "FrameTransform":
        """``self`` after ``other``."""
        return FrameTransform(self.yaw + other.yaw, self.R @ other.t + self.t)


@dataclass
class TransformReport:
    candidates: list  # yaw roots of the closed-form step
    d2_residuals: list  # |predicted d2 - d2| per candidate
    residuals: np.ndarray  # anchor (xy) and both range residuals after refinement
    iterations: int


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def tz_from_anchors(own_anchor, peer_anchor) -> float:
    return float(np.asarray(peer_anchor, dtype=float)[2] - np.asarray(own_anchor, dtype=float)[2])


def _relative(obs: RendezvousObservation):
    """Own and peer positions relative to their anchor."""
    return obs.own_position - obs.own_anchor, obs.peer_position - obs.peer_anchor


def _predicted_range(yaw, w, u):
    c, s = np.cos(yaw), np.sin(yaw)
    dx = u[0] - (c * w[0] - s * w[1])
    dy = u[1] - (s * w[0] + c * w[1])
    return np.sqrt(dx * dx + dy * dy + (u[2] - w[2]) ** 2)


def _yaw_candidates(obs: RendezvousObservation, tol):
    """Roots of ``a cos(th) + b sin(th) = c`` from the first range equation."""
    w, u = _relative(obs)
    a = u[0] * w[0] + u[1] * w[1]
    b = u[1] * w[0] - u[0] * w[1]
    rho = np.hypot(a, b)
    nu, nw = np.hypot(u[0], u[1]), np.hypot(w[0], w[1])
    hz = u[2] - w[2]
    if rho < 1e-9:
        raise DegenerateMotionError("a robot sits on the anchor's vertical; yaw is unobservable")
    d_min = np.sqrt((nu - nw) ** 2 + hz * hz)
    d_max = np.sqrt((nu + nw) ** 2 + hz * hz)
    if obs.range < d_min - tol or obs.range > d_max + tol:
        raise InconsistentMeasurementsError(
            f"range {obs.range:.3f} m outside the reachable interval [{d_min:.3f}, {d_max:.3f}] m")
    c = 0.5 * (nu * nu + nw * nw + hz * hz - obs.range ** 2)
    phi = np.arctan2(b, a)
    beta = np.arccos(np.clip(c / rho, -1.0, 1.0))
    if beta < 1e-12:
        return [float(wrap_angle(phi))]
    return [float(wrap_angle(phi + beta)), float(wrap_angle(phi - beta))]


def _translation(yaw, own_anchor, peer_anchor):
    R = FrameTransform(yaw, np.zeros(3)).R
    return np.asarray(peer_anchor) - R @ np.asarray(own_anchor)


def _refine(yaw, t, obs1, obs2, iterations=20):
    """Gauss-Newton over ``(yaw, tx, ty)`` on the anchor and both range equations."""
    x = np.array([yaw, t[0], t[1]])
    tz = t[2]

    def residuals(x):
        tr = FrameTransform(x[0], np.array([x[1], x[2], tz]))
        ea = (tr.apply(obs1.own_anchor) - obs1.peer_anchor)[:2]
        r = [ea]
        J = [np.zeros((2, 3))]
        dR = np.array([[-np.sin(x[0]), -np.cos(x[0]), 0.0], [np.cos(x[0]), -np.sin(x[0]), 0.0], [0, 0, 0]])
        J[0][:, 0] = (dR @ obs1.own_anchor)[:2]
        J[0][:, 1:] = np.eye(2)
        for o in (obs1, obs2):
            diff = o.peer_position - tr.apply(o.own_position)
            d = np.linalg.norm(diff)
            r.append(np.array([d - o.range]))
            n = diff / max(d, 1e-12)
            J.append(np.array([[-n @ (dR @ o.own_position), -n[0], -n[1]]]))
        return np.concatenate(r), np.vstack(J)

    it = 0
    for it in range(1, iterations + 1):
        r, J = residuals(x)
        dx, *_ = np.linalg.lstsq(J, -r, rcond=None)
        x = x + dx
        if np.linalg.norm(dx) < 1e-12:
            break
    r, _ = residuals(x)
    return FrameTransform(float(wrap_angle(x[0])), np.array([x[1], x[2], tz])), r, it


def estimate_transform(obs1: RendezvousObservation, obs2: RendezvousObservation, sigma=0.05,
                       refine=True, return_report=False):
    """Transform mapping the own frame into the peer frame.

    The first range gives up to two yaw roots; the one that reproduces the
    second range is kept. A root "fits" when its range error is below
    ``max(3 sigma, 0.05)``; two fitting roots raise ``AmbiguousGeometryError``.
    """
    if obs1.t == obs2.t:
        raise DegenerateMotionError("observations share a timestamp")
    w1, u1 = _relative(obs1)
    w2, u2 = _relative(obs2)
    if np.linalg.norm(w2 - w1) < 1e-6 and np.linalg.norm(u2 - u1) < 1e-6:
        raise DegenerateMotionError("neither robot moved between the two observations")
    tol = max(3.0 * sigma, 0.05)
    tz = tz_from_anchors(obs1.own_anchor, obs1.peer_anchor)

    cands = _yaw_candidates(obs1, tol)
    res2 = [abs(_predicted_range(th, w2, u2) - obs2.range) for th in cands]
    if len(cands) == 2 and max(res2) < tol:
        raise AmbiguousGeometryError(
            f"both candidate intersections consistent with the second range (errors {res2[0]:.3g}, {res2[1]:.3g} m)")
    k = int(np.argmin(res2))
    if res2[k] > tol + max(obs2.range, 1.0) and not refine:
        raise InconsistentMeasurementsError("no candidate reproduces the second range")
    yaw = cands[k]
    t = _translation(yaw, obs1.own_anchor, obs1.peer_anchor)
    t[2] = tz
    T = FrameTransform(yaw, t)
    r = None
    it = 0
    if refine:
        T, r, it = _refine(yaw, t, obs1, obs2)
    if return_report:
        return T, TransformReport(cands, res2, r, it)
    return T


def apply_transform(T: FrameTransform, traj: Trajectory) -> Trajectory:
    """Map every pose of ``traj`` through ``T`` (positions and orientations)."""
    q_yaw = geom.yaw_quat(T.yaw)
    q = geom.quat_mul_n(np.broadcast_to(q_yaw, traj.q.shape), traj.q)
    return Trajectory(traj.t.copy(), T.apply(traj.p), q)


# ---------------------------------------------------------------- messages

@dataclass(frozen=True)
class RendezvousMessage:
    stamp: float
    position: np.ndarray
    anchor: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float).reshape(3))

    def to_row(self):
        return [repr(float(self.stamp))] + [repr(float(x)) for x in (*self.position, *self.anchor)]

    @classmethod
    def from_row(cls, row):
        if len(row) != 7:
            raise ValueError(f"rendezvous message needs 7 fields, got {len(row)}")
        v = [float(x) for x in row]
        return cls(v[0], v[1:4], v[4:7])


def make_rendezvous_msg(estimator) -> RendezvousMessage:
    """Current position and fixed anchor of a running estimator."""
    a = estimator.graph.anchor
    if a is None or not a.fixed:
        raise NotReadyError("anchor is not fixed yet")
    return RendezvousMessage(estimator.current_stamp, estimator.current_pose().translation.copy(),
                             a.position.copy())


def save_messages(path, msgs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stamp", "px", "py", "pz", "ax", "ay", "az"])
        for m in msgs:
            w.writerow(m.to_row())


def load_messages(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and rows[0][0] == "stamp":
        rows = rows[1:]
    return [RendezvousMessage.from_row(r) for r in rows]


def observation_from_messages(own: RendezvousMessage, peer: RendezvousMessage, distance) -> RendezvousObservation:
    return RendezvousObservation(own.stamp, own.position, peer.position, peer.anchor, own.anchor, float(distance))
