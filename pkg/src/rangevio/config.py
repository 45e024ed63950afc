"""Dataclass configs and TOML loading."""

from __future__ import annotations

import dataclasses
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class TrajectorySpec:
    """Analytic ground-truth path.

    ``shape`` is one of ``circle``, ``lissajous``, ``waypoint-spline`` or ``static``.
    For ``circle`` the extent is ``radius``; for ``lissajous`` it is ``amplitude``
    with ``cycles`` full periods per axis over ``duration``.
    """

    shape: str = "circle"
    duration: float = 60.0
    imu_rate: float = 200.0
    cam_rate: float = 10.0
    uwb_rate: float = 10.0
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 5.0
    loops: float = 1.0
    z_amplitude: float = 0.0
    z_cycles: float = 0.0
    amplitude: tuple = (5.0, 3.0, 0.0)
    cycles: tuple = (1.0, 2.0, 0.0)
    phase: float = 0.0
    waypoints: tuple = ()
    # roll/pitch oscillation (rad) and its number of cycles over the run
    wobble: float = 0.0
    wobble_cycles: float = 7.0

    def validate(self):
        if self.shape not in ("circle", "lissajous", "waypoint-spline", "static"):
            raise ConfigError(f"unknown trajectory shape {self.shape!r}")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if not (self.imu_rate >= self.cam_rate >= self.uwb_rate > 0):
            raise ConfigError("rates must satisfy imu_rate >= cam_rate >= uwb_rate > 0")
        if self.shape == "waypoint-spline" and len(self.waypoints) < 2:
            raise ConfigError("waypoint-spline needs at least two waypoints")


@dataclass
class NoiseSpec:
    accel_noise_density: float = 0.0  # m/s^2/sqrt(Hz)
    gyro_noise_density: float = 0.0  # rad/s/sqrt(Hz)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias_walk: float = 0.0  # m/s^3/sqrt(Hz)
    gyro_bias_walk: float = 0.0  # rad/s^2/sqrt(Hz)
    pixel_sigma: float = 0.0
    uwb_sigma: float = 0.0
    # piecewise-linear (distance_m, bias_m) pairs; empty means zero bias
    uwb_bias_table: tuple = ()
    rng_seed: int = 0

    def validate(self):
        for name in ("accel_noise_density", "gyro_noise_density", "accel_bias_walk",
                     "gyro_bias_walk", "pixel_sigma", "uwb_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class CameraSpec:
    fx: float = 300.0
    fy: float = 300.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    # camera-to-body rotation; default looks along body +x with image y down
    body_from_cam: tuple = ((0.0, 0.0, 1.0), (-1.0, 0.0, 0.0), (0.0, -1.0, 0.0))
    body_from_cam_t: tuple = (0.0, 0.0, 0.0)
    min_depth: float = 0.3
    max_depth: float = 30.0


@dataclass
class LandmarkSpec:
    count: int = 400
    # annulus around the trajectory centroid, offsets beyond its horizontal extent
    inner_margin: float = 3.0
    outer_margin: float = 7.0
    z_range: tuple = (-2.0, 4.0)
    max_features: int = 40


@dataclass
class RobustLossSpec:
    delta: float = 0.1

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError("robust loss delta must be positive")


@dataclass
class UwbFactorSpec:
    gamma_r: float = 400.0  # 1/m^2, i.e. 1/sigma_uwb^2 for sigma = 0.05 m
    gamma_s: float = 100.0
    link_horizon: int = 3

    def __post_init__(self):
        if not (self.gamma_r > 0 and self.gamma_s > 0):
            raise ConfigError("UWB weights must be positive")
        if self.link_horizon < 1:
            raise ConfigError("link_horizon must be >= 1")


@dataclass
class EstimatorConfig:
    window_size: int = 10
    long_window_size: int = 100
    uwb: UwbFactorSpec = field(default_factory=UwbFactorSpec)
    range_loss: RobustLossSpec = field(default_factory=lambda: RobustLossSpec(0.1))
    vision_loss: RobustLossSpec = field(default_factory=lambda: RobustLossSpec(1.0))
    use_uwb: bool = True
    use_vision: bool = True
    pixel_sigma: float = 1.0
    # IMU noise model used to weight the preintegration residual
    accel_noise_density: float = 0.02
    gyro_noise_density: float = 0.002
    accel_bias_walk: float = 1e-3
    gyro_bias_walk: float = 1e-4
    gravity: tuple = (0.0, 0.0, -9.81)
    repreintegrate_threshold: float = 1e-2
    # Levenberg-Marquardt
    lm_initial_damping: float = 1e-4
    lm_max_iterations: int = 10
    lm_cost_tolerance: float = 1e-6
    lm_max_damping: float = 1e8
    # keyframe policy
    keyframe_parallax_px: float = 10.0
    keyframe_min_tracked: int = 20
    # anchor initialization and fixing
    anchor_min_ranges: int = 10
    anchor_fix_tolerance: float = 0.01
    anchor_fix_consecutive: int = 10
    anchor_extent_ratio: float = 0.5
    anchor_min_observability: float = 0.05
    # fixing may demand better bearing coverage than initialization; None reuses the value above
    anchor_fix_observability: float | None = None
    anchor_initial: tuple | None = None
    anchor_fixed_initially: bool = False
    # prior on the first state (gauge): p, v, theta, b_a, b_w sigmas
    initial_sigmas: tuple = (1e-4, 1e-2, 1e-4, 0.1, 0.01)
    min_landmark_depth: float = 0.2
    max_landmark_depth: float = 60.0

    def validate(self):
        if self.window_size < 2:
            raise ConfigError("window_size must be >= 2")
        if self.long_window_size < self.uwb.link_horizon + 1:
            raise ConfigError("long_window_size must exceed link_horizon")


@dataclass
class PeerSpec:
    """Second robot for rendezvous scenarios."""

    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    # yaw (rad) and translation of the peer world frame expressed in the global frame
    frame_yaw: float = 1.0
    frame_translation: tuple = (2.0, -1.0, 0.3)
    rendezvous_times: tuple = (20.0, 30.0)
    range_sigma: float = 0.0


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    anchor: tuple = (0.0, 0.0, 0.0)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    camera: CameraSpec = field(default_factory=CameraSpec)
    landmarks: LandmarkSpec = field(default_factory=LandmarkSpec)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    peer: PeerSpec | None = None
    # ATE alignment: "se3" or "4dof"
    alignment: str = "se3"
    run_baseline: bool = True


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        hint = hints[key]
        target = _dataclass_in(hint)
        if target is not None and isinstance(value, dict):
            kwargs[key] = _build(target, value, f"{where}.{key}")
        else:
            kwargs[key] = _freeze(value)
    return cls(**kwargs)


def _dataclass_in(hint):
    if dataclasses.is_dataclass(hint):
        return hint
    for arg in typing.get_args(hint):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def scenario_from_dict(data: dict) -> ScenarioConfig:
    cfg = _build(ScenarioConfig, data, "scenario")
    cfg.trajectory.validate()
    cfg.noise.validate()
    cfg.estimator.validate()
    if cfg.peer is not None:
        cfg.peer.trajectory.validate()
    return cfg


def load_scenario(path) -> ScenarioConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return scenario_from_dict(data)


def bundled_scenario(name: str) -> Path:
    path = Path(__file__).parent / "scenarios" / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"no bundled scenario named {name!r}")
    return path


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = to_dict(value)
        elif value is None:
            continue
        elif isinstance(value, tuple):
            out[f.name] = _listify(value)
        else:
            out[f.name] = value
    return out


def _listify(value):
    if isinstance(value, tuple):
        return [_listify(v) for v in value]
    return value
