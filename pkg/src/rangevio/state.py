from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom


@dataclass
class RobotState:
    """Full keyframe state: position, velocity, orientation and IMU biases.

    The tangent used by the optimizer is 15-dimensional, ordered
    ``[dp, dv, dtheta, db_a, db_w]``.
    """

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: geom.IDENTITY_QUAT.copy())
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stamp: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).copy()
        self.v = np.asarray(self.v, dtype=float).copy()
        self.q = geom.normalize(self.q)
        self.b_a = np.asarray(self.b_a, dtype=float).copy()
        self.b_w = np.asarray(self.b_w, dtype=float).copy()

    def copy(self) -> "RobotState":
        return RobotState(self.p, self.v, self.q, self.b_a, self.b_w, self.stamp)

    def boxplus(self, dx) -> "RobotState":
        return RobotState(self.p + dx[0:3], self.v + dx[3:6], geom.quat_mul(self.q, geom.quat_exp(dx[6:9])),
                          self.b_a + dx[9:12], self.b_w + dx[12:15], self.stamp)

    def boxminus(self, other: "RobotState"):
        """Tangent difference ``self [-] other`` with the 2 vec(q) rotation chart."""
        return np.concatenate([self.p - other.p, self.v - other.v, geom.quat_boxminus(self.q, other.q),
                               self.b_a - other.b_a, self.b_w - other.b_w])

    @property
    def R(self):
        return geom.quat_to_rot(self.q)

    def pose(self) -> geom.Pose:
        return geom.Pose(self.q, self.p)
