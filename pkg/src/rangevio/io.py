"""Text file formats: TUM trajectories and the CSV measurement files."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import geom
from .sim import ImuSamples, RangeMeasurement

log = logging.getLogger(__name__)


class FormatError(ValueError):
    pass


@dataclass
class Trajectory:
    """Stamped poses; ``q`` rows are ``[w, x, y, z]`` world-from-body."""

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        if np.any(np.diff(self.t) <= 0):
            raise FormatError("trajectory stamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def pose(self, i) -> geom.Pose:
        return geom.Pose(self.q[i], self.p[i])


def _fmt(x):
    return repr(float(x))


def load_tum(path) -> Trajectory:
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` starts a comment."""
    ts, ps, qs = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            cols = line.replace(",", " ").split()
            if len(cols) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 columns, got {len(cols)}")
            try:
                vals = [float(c) for c in cols]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            q = np.array([vals[7], vals[4], vals[5], vals[6]])
            n = np.linalg.norm(q)
            if n < 0.9 or n > 1.1:
                raise FormatError(f"{path}:{lineno}: quaternion norm {n:.4f} is not unit")
            if abs(n - 1.0) > 1e-3:
                log.warning("%s:%d: renormalizing quaternion with norm %.6f", path, lineno, n)
            ts.append(vals[0])
            ps.append(vals[1:4])
            qs.append(q / n)
    t = np.asarray(ts)
    if np.any(np.diff(t) <= 0):
        bad = int(np.flatnonzero(np.diff(t) <= 0)[0]) + 1
        raise FormatError(f"{path}: timestamps not strictly increasing at entry {bad}")
    return Trajectory(t, np.asarray(ps).reshape(-1, 3), np.asarray(qs).reshape(-1, 4))


def save_tum(path, traj: Trajectory):
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p, q in zip(traj.t, traj.p, traj.q):
            fh.write(" ".join(_fmt(x) for x in (t, *p, q[1], q[2], q[3], q[0])) + "\n")


def save_ranges(path, ranges):
    with open(path, "w") as fh:
        fh.write("timestamp,peer_id,distance_m\n")
        for r in ranges:
            fh.write(f"{_fmt(r.t)},{r.peer_id},{_fmt(r.distance)}\n")


def load_ranges(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("timestamp"):
                continue
            cols = line.split(",")
            if len(cols) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 columns")
            out.append(RangeMeasurement(float(cols[0]), cols[1], float(cols[2])))
    return out


def save_imu(path, imu: ImuSamples):
    with open(path, "w") as fh:
        fh.write("timestamp,ax,ay,az,gx,gy,gz\n")
        for t, a, g in zip(imu.t, imu.accel, imu.gyro):
            fh.write(",".join(_fmt(x) for x in (t, *a, *g)) + "\n")


def load_imu(path) -> ImuSamples:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 7:
        raise FormatError(f"{path}: expected 7 columns")
    return ImuSamples(data[:, 0], data[:, 1:4], data[:, 4:7])


def save_features(path, stamps, frames):
    with open(path, "w") as fh:
        fh.write("frame_timestamp,landmark_id,u,v\n")
        for t, obs in zip(stamps, frames):
            for lid, (u, v) in obs.items():
                fh.write(f"{_fmt(t)},{lid},{_fmt(u)},{_fmt(v)}\n")


def load_features(path):
    """Return ``(stamps, frames)`` grouped by frame timestamp."""
    stamps, frames = [], []
    with open(path) as fh:
        next(fh, None)
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            cols = line.split(",")
            if len(cols) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns")
            t = float(cols[0])
            if not stamps or t != stamps[-1]:
                stamps.append(t)
                frames.append({})
            frames[-1][int(cols[1])] = (float(cols[2]), float(cols[3]))
    return stamps, frames
