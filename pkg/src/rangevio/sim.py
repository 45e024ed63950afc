"""Deterministic ground truth and synthetic IMU / UWB / feature measurements."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import geom
from .config import CameraSpec, ConfigError, LandmarkSpec, NoiseSpec, TrajectorySpec

GRAVITY = np.array([0.0, 0.0, -9.81])

# independent RNG streams derived from one seed
_STREAM_IMU, _STREAM_UWB, _STREAM_PIXEL, _STREAM_TRACKS, _STREAM_LANDMARKS = range(5)


def stream_rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


@dataclass
class GroundTruth:
    """Sampled trajectory; ``q`` is world-from-body, ``omega`` is the body rate."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    cam_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    uwb_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.t)

    def pose(self, i) -> geom.Pose:
        return geom.Pose(self.q[i], self.p[i])

    def transformed(self, pose: geom.Pose) -> "GroundTruth":
        """Express the trajectory in another world frame, ``x' = pose.apply(x)``.

        Only yaw-plus-translation transforms keep the gravity direction; the body
        rate is unchanged because it lives in the body frame.
        """
        R = pose.R
        q = np.array([geom.quat_mul(pose.rotation, qi) for qi in self.q])
        return GroundTruth(self.t.copy(), self.p @ R.T + pose.translation, self.v @ R.T,
                           self.a @ R.T, q, self.omega.copy(), self.cam_idx.copy(), self.uwb_idx.copy())


@dataclass
class ImuSamples:
    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __len__(self):
        return len(self.t)

    def segment(self, i0, i1):
        """Samples ``i0..i1`` inclusive."""
        return ImuSamples(self.t[i0:i1 + 1], self.accel[i0:i1 + 1], self.gyro[i0:i1 + 1])


@dataclass
class RangeMeasurement:
    t: float
    peer_id: str
    distance: float


@dataclass
class FeatureTrack:
    landmark_id: int
    observations: list  # (frame_index, u, v)
    position: np.ndarray  # true landmark, never given to the estimator


# ---------------------------------------------------------------- trajectories

def _path_functions(spec: TrajectorySpec):
    """Return ``f(t) -> (p, v, a)`` evaluated analytically for arrays of t."""
    c = np.asarray(spec.center, dtype=float)
    T = spec.duration

    if spec.shape == "static" or (spec.shape == "circle" and spec.radius == 0 and spec.z_amplitude == 0):
        def f(t):
            n = len(t)
            return np.tile(c, (n, 1)), np.zeros((n, 3)), np.zeros((n, 3))
        return f

    if spec.shape == "circle":
        w = 2 * np.pi * spec.loops / T
        wz = 2 * np.pi * spec.z_cycles / T
        r, az = spec.radius, spec.z_amplitude

        def f(t):
            ct, st = np.cos(w * t), np.sin(w * t)
            sz, cz = np.sin(wz * t), np.cos(wz * t)
            p = np.stack([r * ct, r * st, az * sz], axis=1) + c
            v = np.stack([-r * w * st, r * w * ct, az * wz * cz], axis=1)
            a = np.stack([-r * w * w * ct, -r * w * w * st, -az * wz * wz * sz], axis=1)
            return p, v, a
        return f

    if spec.shape == "lissajous":
        A = np.asarray(spec.amplitude, dtype=float)
        W = 2 * np.pi * np.asarray(spec.cycles, dtype=float) / T
        ph = np.array([spec.phase, 0.0, 0.0])

        def f(t):
            arg = np.outer(t, W) + ph
            p = A * np.sin(arg) + c
            v = A * W * np.cos(arg)
            a = -A * W * W * np.sin(arg)
            return p, v, a
        return f

    pts = np.asarray(spec.waypoints, dtype=float)
    knots = np.linspace(0.0, T, len(pts))
    closed = np.allclose(pts[0], pts[-1])
    spline = CubicSpline(knots, pts, bc_type="periodic" if closed else "natural", axis=0)
    d1, d2 = spline.derivative(1), spline.derivative(2)

    def f(t):
        return spline(t), d1(t), d2(t)
    return f


def _orientation(spec: TrajectorySpec, t, v, a):
    """Heading follows horizontal velocity; optional roll/pitch wobble."""
    vx, vy, ax, ay = v[:, 0], v[:, 1], a[:, 0], a[:, 1]
    speed2 = vx * vx + vy * vy
    moving = speed2 > 1e-12
    yaw = np.where(moving, np.arctan2(vy, vx), 0.0)
    yaw_rate = np.where(moving, (vx * ay - vy * ax) / np.where(moving, speed2, 1.0), 0.0)
    if not moving.all():
        # hold the last valid heading through stops
        last = 0.0
        for i in range(len(yaw)):
            if moving[i]:
                last = yaw[i]
            else:
                yaw[i] = last

    k = 2 * np.pi * spec.wobble_cycles / spec.duration
    pitch = spec.wobble * np.sin(k * t)
    pitch_rate = spec.wobble * k * np.cos(k * t)
    roll = spec.wobble * np.sin(1.3 * k * t + 0.5)
    roll_rate = spec.wobble * 1.3 * k * np.cos(1.3 * k * t + 0.5)

    q = np.array([geom.euler_zyx_to_quat(y, p, r) for y, p, r in zip(yaw, pitch, roll)])
    omega = np.stack([
        roll_rate - yaw_rate * np.sin(pitch),
        pitch_rate * np.cos(roll) + yaw_rate * np.cos(pitch) * np.sin(roll),
        -pitch_rate * np.sin(roll) + yaw_rate * np.cos(pitch) * np.cos(roll),
    ], axis=1)
    return q, omega


def _decimation(high, low):
    ratio = high / low
    step = int(round(ratio))
    if abs(ratio - step) > 1e-9:
        raise ConfigError(f"rate {high} Hz is not an integer multiple of {low} Hz")
    return step


def gen_trajectory(spec: TrajectorySpec) -> GroundTruth:
    spec.validate()
    n = int(round(spec.duration * spec.imu_rate)) + 1
    t = np.arange(n) / spec.imu_rate
    p, v, a = _path_functions(spec)(t)
    q, omega = _orientation(spec, t, v, a)
    cam_step = _decimation(spec.imu_rate, spec.cam_rate)
    uwb_step = _decimation(spec.imu_rate, spec.uwb_rate)
    return GroundTruth(t, p, v, a, q, omega, np.arange(0, n, cam_step), np.arange(0, n, uwb_step))


def path_functions(spec: TrajectorySpec):
    """Analytic ``t -> (p, v, a)`` used by :func:`gen_trajectory`."""
    return _path_functions(spec)


# ---------------------------------------------------------------- IMU

def synth_imu(traj: GroundTruth, noise: NoiseSpec) -> ImuSamples:
    """Specific force and body rate with constant (or random-walk) biases."""
    n = len(traj)
    dt = traj.t[1] - traj.t[0] if n > 1 else 1.0
    rng = stream_rng(noise.rng_seed, _STREAM_IMU)
    R = np.array([geom.quat_to_rot(q) for q in traj.q])
    f_world = traj.a - GRAVITY
    accel = np.einsum("nji,nj->ni", R, f_world)
    gyro = traj.omega.copy()

    ba = np.tile(np.asarray(noise.accel_bias, dtype=float), (n, 1))
    bg = np.tile(np.asarray(noise.gyro_bias, dtype=float), (n, 1))
    if noise.accel_bias_walk > 0:
        ba += np.cumsum(rng.standard_normal((n, 3)) * noise.accel_bias_walk * np.sqrt(dt), axis=0)
    if noise.gyro_bias_walk > 0:
        bg += np.cumsum(rng.standard_normal((n, 3)) * noise.gyro_bias_walk * np.sqrt(dt), axis=0)
    accel += ba
    gyro += bg
    if noise.accel_noise_density > 0:
        accel += rng.standard_normal((n, 3)) * noise.accel_noise_density / np.sqrt(dt)
    if noise.gyro_noise_density > 0:
        gyro += rng.standard_normal((n, 3)) * noise.gyro_noise_density / np.sqrt(dt)
    return ImuSamples(traj.t.copy(), accel, gyro)


# ---------------------------------------------------------------- UWB

def uwb_bias(noise: NoiseSpec, distance):
    if not noise.uwb_bias_table:
        return np.zeros_like(np.asarray(distance, dtype=float))
    table = np.asarray(noise.uwb_bias_table, dtype=float)
    order = np.argsort(table[:, 0])
    return np.interp(distance, table[order, 0], table[order, 1])


def range_model(positions, anchor, noise: NoiseSpec, rng):
    d = np.linalg.norm(np.asarray(positions, dtype=float) - np.asarray(anchor, dtype=float), axis=1)
    out = d + uwb_bias(noise, d)
    if noise.uwb_sigma > 0:
        out = out + rng.standard_normal(len(d)) * noise.uwb_sigma
    return np.maximum(out, 0.0)


def synth_uwb(traj: GroundTruth, anchor, noise: NoiseSpec, rate=None, peer_id="anchor"):
    """Ranges to a static anchor at ``rate`` Hz (default: the trajectory's UWB index)."""
    if rate is None:
        idx = traj.uwb_idx
    else:
        imu_rate = 1.0 / (traj.t[1] - traj.t[0])
        idx = np.arange(0, len(traj), _decimation(round(imu_rate, 9), rate))
    rng = stream_rng(noise.rng_seed, _STREAM_UWB)
    d = range_model(traj.p[idx], anchor, noise, rng)
    return [RangeMeasurement(float(traj.t[i]), peer_id, float(di)) for i, di in zip(idx, d)]


def inject_uwb_into_trajectory(stamps, positions, anchor, noise: NoiseSpec, rate=10.0, peer_id="anchor"):
    """Ranges for an external ground-truth trajectory, thinned to ``rate`` Hz."""
    stamps = np.asarray(stamps, dtype=float)
    if np.any(np.diff(stamps) <= 0):
        raise ValueError("ground-truth timestamps must be strictly increasing")
    keep = []
    last = -np.inf
    min_gap = 1.0 / rate - 1e-9
    for i, s in enumerate(stamps):
        if s - last >= min_gap:
            keep.append(i)
            last = s
    keep = np.asarray(keep, dtype=int)
    rng = stream_rng(noise.rng_seed, _STREAM_UWB)
    d = range_model(np.asarray(positions)[keep], anchor, noise, rng)
    return [RangeMeasurement(float(stamps[i]), peer_id, float(di)) for i, di in zip(keep, d)]


def inject_uwb_into_trajectory_file(gt_file, anchor, noise: NoiseSpec, rate=10.0, peer_id="anchor"):
    """:func:`inject_uwb_into_trajectory` on a TUM ground-truth file."""
    from .io import load_tum

    traj = load_tum(gt_file)
    return inject_uwb_into_trajectory(traj.t, traj.p, anchor, noise, rate, peer_id)


# ---------------------------------------------------------------- vision

def camera_matrix(cam: CameraSpec):
    return np.array([[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]])


def camera_pose(cam: CameraSpec, q_wb, p_wb):
    """World-from-camera rotation matrix and camera centre."""
    R_wb = geom.quat_to_rot(q_wb)
    R_bc = np.asarray(cam.body_from_cam, dtype=float)
    return R_wb @ R_bc, p_wb + R_wb @ np.asarray(cam.body_from_cam_t, dtype=float)


def project(cam: CameraSpec, pts_c):
    pts_c = np.atleast_2d(pts_c)
    z = pts_c[:, 2]
    u = cam.fx * pts_c[:, 0] / z + cam.cx
    v = cam.fy * pts_c[:, 1] / z + cam.cy
    return np.stack([u, v], axis=1)


def make_landmarks(traj: GroundTruth, spec: LandmarkSpec, seed) -> np.ndarray:
    """Landmarks scattered in an annulus ("walls") around the trajectory."""
    rng = stream_rng(seed, _STREAM_LANDMARKS)
    centre = traj.p[:, :2].mean(axis=0)
    extent = np.max(np.linalg.norm(traj.p[:, :2] - centre, axis=1))
    r = rng.uniform(extent + spec.inner_margin, extent + spec.outer_margin, spec.count)
    ang = rng.uniform(0.0, 2 * np.pi, spec.count)
    z = rng.uniform(*spec.z_range, spec.count) + traj.p[:, 2].mean()
    return np.stack([centre[0] + r * np.cos(ang), centre[1] + r * np.sin(ang), z], axis=1)


def synth_features(traj: GroundTruth, landmarks, cam: CameraSpec, noise: NoiseSpec, max_features=40):
    """Simulated feature tracker.

    Tracks continue while their landmark stays in the frustum; free slots are
    refilled with random visible landmarks. A landmark that leaves and re-enters
    the view starts a new track id.

    Returns ``(frames, tracks)`` where ``frames[k]`` maps track id to the noisy
    pixel ``(u, v)`` at camera frame ``k``.
    """
    landmarks = np.asarray(landmarks, dtype=float)
    px_rng = stream_rng(noise.rng_seed, _STREAM_PIXEL)
    pick_rng = stream_rng(noise.rng_seed, _STREAM_TRACKS)
    active = {}  # landmark index -> track id
    tracks = {}
    frames = []
    next_id = 0
    for k, i in enumerate(traj.cam_idx):
        R_wc, p_wc = camera_pose(cam, traj.q[i], traj.p[i])
        pts_c = (landmarks - p_wc) @ R_wc
        z = pts_c[:, 2]
        in_front = (z > cam.min_depth) & (z < cam.max_depth)
        uv = np.full((len(landmarks), 2), np.nan)
        uv[in_front] = project(cam, pts_c[in_front])
        pixel_noise = px_rng.standard_normal((len(landmarks), 2)) * noise.pixel_sigma
        uv_noisy = uv + pixel_noise
        visible = in_front & (uv_noisy[:, 0] >= 0) & (uv_noisy[:, 0] < cam.width) \
            & (uv_noisy[:, 1] >= 0) & (uv_noisy[:, 1] < cam.height)

        obs = {}
        for lm in list(active):
            if visible[lm]:
                obs[active[lm]] = (float(uv_noisy[lm, 0]), float(uv_noisy[lm, 1]))
            else:
                del active[lm]
        free = max_features - len(active)
        if free > 0:
            candidates = np.flatnonzero(visible)
            candidates = candidates[[c not in active for c in candidates]] if len(candidates) else candidates
            pick_rng.shuffle(candidates)
            for lm in candidates[:free]:
                active[int(lm)] = next_id
                tracks[next_id] = FeatureTrack(next_id, [], landmarks[lm].copy())
                obs[next_id] = (float(uv_noisy[lm, 0]), float(uv_noisy[lm, 1]))
                next_id += 1
        for tid, (u, v) in obs.items():
            tracks[tid].observations.append((k, u, v))
        frames.append(dict(sorted(obs.items())))
    return frames, tracks


def triangulate_dlt(Ps, uvs):
    """Linear triangulation from 3x4 projection matrices and pixel observations."""
    A = []
    for P, (u, v) in zip(Ps, uvs):
        A.append(u * P[2] - P[0])
        A.append(v * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.asarray(A))
    X = Vt[-1]
    return X[:3] / X[3]


def projection_matrix(cam: CameraSpec, q_wb, p_wb):
    R_wc, p_wc = camera_pose(cam, q_wb, p_wb)
    Rt = np.hstack([R_wc.T, (-R_wc.T @ p_wc)[:, None]])
    return camera_matrix(cam) @ Rt


# ---------------------------------------------------------------- bundles

@dataclass
class SimulatedRun:
    truth: GroundTruth
    imu: ImuSamples
    ranges: list
    frames: list
    tracks: dict
    landmarks: np.ndarray
    anchor: np.ndarray


def simulate(traj_spec: TrajectorySpec, noise: NoiseSpec, cam: CameraSpec, lm_spec: LandmarkSpec,
             anchor=(0.0, 0.0, 0.0), truth: GroundTruth | None = None, landmarks=None) -> SimulatedRun:
    truth = gen_trajectory(traj_spec) if truth is None else truth
    if landmarks is None:
        landmarks = make_landmarks(truth, lm_spec, noise.rng_seed)
    imu = synth_imu(truth, noise)
    ranges = synth_uwb(truth, anchor, noise)
    frames, tracks = synth_features(truth, landmarks, cam, noise, lm_spec.max_features)
    return SimulatedRun(truth, imu, ranges, frames, tracks, np.asarray(landmarks), np.asarray(anchor, dtype=float))
