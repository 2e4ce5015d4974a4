from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import ArgumentError, ConfigError, TrajectoryShape
from .geometry import Pose, interpolate, rotation_about

logger = logging.getLogger(__name__)

TIME_EPSILON = 1e-9


@dataclass
class ScenarioConfig:
    shape: str = TrajectoryShape.LOOP.value
    duration: float = 60.0
    camera_rate: float = 20.0
    odometry_rate: float = 100.0
    pixel_sigma: float = 1.0
    outlier_rate: float = 0.02
    # per-step sigmas of the inertial increment stream (rad, m)
    odometry_sigmas: Tuple[float, float] = (0.001, 0.005)
    # per-step sigmas of the external wheel odometry stream (rad, m)
    wheel_sigmas: Tuple[float, float] = (0.0005, 0.002)
    landmark_count: int = 2000
    occlusions: Dict[int, List[Tuple[float, float]]] = field(default_factory=dict)
    false_positive_rate: float = 0.0
    seed: int = 0
    name: str = "scenario"
    speed: float = 5.0
    radius: float = 25.0
    laps: float = 2.0
    ramp_height: float = 3.0
    corridor: Tuple[float, float] = (3.0, 15.0)
    landmark_heights: Tuple[float, float] = (0.0, 5.0)
    max_feature_range: float = 40.0
    ground_pixel_step: int = 40
    ground_max_range: float = 12.0
    ground_frame_stride: int = 10

    @property
    def trajectory_shape(self) -> TrajectoryShape:
        try:
            return TrajectoryShape(self.shape)
        except ValueError:
            raise ConfigError(f"Unknown trajectory shape {self.shape!r}")

    def validate(self) -> ScenarioConfig:
        self.trajectory_shape
        if not (self.camera_rate > 0 and self.odometry_rate > 0):
            raise ConfigError(f"Rates must be positive, got {self.camera_rate} / {self.odometry_rate}")
        if self.camera_rate > self.odometry_rate:
            raise ConfigError(f"Camera rate {self.camera_rate} exceeds odometry rate {self.odometry_rate}")
        if self.duration <= 0:
            raise ConfigError(f"Duration must be positive, got {self.duration}")
        for name in ("outlier_rate", "false_positive_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.pixel_sigma < 0 or min(self.odometry_sigmas) < 0 or min(self.wheel_sigmas) < 0:
            raise ConfigError("Noise sigmas must be non-negative")
        if self.landmark_count < 0:
            raise ConfigError(f"landmark_count must be non-negative, got {self.landmark_count}")
        if not 0 <= self.corridor[0] <= self.corridor[1]:
            raise ConfigError(f"Invalid corridor {self.corridor}")
        if self.ground_pixel_step < 1 or self.ground_frame_stride < 1:
            raise ConfigError("Ground sampling steps must be >= 1")
        for camera, windows in self.occlusions.items():
            for t0, t1 in windows:
                if t1 < t0:
                    raise ConfigError(f"Occlusion window ({t0}, {t1}) of camera {camera} is reversed")
        return self

    def is_occluded(self, camera: int, timestamp: float) -> bool:
        return any(t0 <= timestamp <= t1 for t0, t1 in self.occlusions.get(camera, ()))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["occlusions"] = {str(k): [list(w) for w in v] for k, v in self.occlusions.items()}
        for key in ("odometry_sigmas", "wheel_sigmas", "corridor", "landmark_heights"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> ScenarioConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"Unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        if "occlusions" in d:
            try:
                d["occlusions"] = {
                    int(k): [(float(w[0]), float(w[1])) for w in v] for k, v in (d["occlusions"] or {}).items()
                }
            except (TypeError, ValueError, IndexError) as e:
                raise ConfigError(f"Malformed occlusions: {e}")
        for key in ("odometry_sigmas", "wheel_sigmas", "corridor", "landmark_heights"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d).validate()

    @classmethod
    def from_json_file(cls, path: Union[str, Path]) -> ScenarioConfig:
        with open(path) as f:
            try:
                return cls.from_dict(json.load(f))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}")

    def to_json_file(self, path: Union[str, Path]):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


class Trajectory:
    """ Ordered (timestamp, Pose) pairs with strictly increasing timestamps. """

    def __init__(self, timestamps: Sequence[float], poses: Sequence[Pose]):
        self.timestamps = np.asarray(timestamps, dtype=float)
        self.poses: List[Pose] = list(poses)
        assert len(self.timestamps) == len(self.poses), f"{len(self.timestamps)} timestamps, {len(self.poses)} poses"
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ArgumentError("Trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self) -> Iterator[Tuple[float, Pose]]:
        return zip(self.timestamps.tolist(), self.poses)

    def __getitem__(self, index: int) -> Tuple[float, Pose]:
        return float(self.timestamps[index]), self.poses[index]

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])

    @property
    def length(self) -> float:
        """ Path length [m] """
        if len(self) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    @property
    def start_time(self) -> float:
        return float(self.timestamps[0])

    @property
    def end_time(self) -> float:
        return float(self.timestamps[-1])

    def covers(self, timestamp: float) -> bool:
        return len(self) > 0 and self.start_time - TIME_EPSILON <= timestamp <= self.end_time + TIME_EPSILON

    def pose_at(self, timestamp: float) -> Pose:
        """ Pose at an arbitrary time inside the trajectory span, interpolated between samples. """
        if not self.covers(timestamp):
            raise ArgumentError(f"Time {timestamp} outside trajectory span [{self.start_time}, {self.end_time}]")
        index = int(np.searchsorted(self.timestamps, timestamp))
        if index < len(self) and abs(self.timestamps[index] - timestamp) <= TIME_EPSILON:
            return self.poses[index]
        if index > 0 and abs(self.timestamps[index - 1] - timestamp) <= TIME_EPSILON:
            return self.poses[index - 1]
        index = min(max(index, 1), len(self) - 1)
        t0, t1 = self.timestamps[index - 1], self.timestamps[index]
        alpha = min(max((timestamp - t0) / (t1 - t0), 0.0), 1.0)
        return interpolate(self.poses[index - 1], self.poses[index], alpha)

    def transformed(self, g: Pose) -> Trajectory:
        return Trajectory(self.timestamps, [g @ p for p in self.poses])


def sample_times(duration: float, rate: float) -> np.ndarray:
    count = int(math.floor(duration * rate + TIME_EPSILON))
    return np.arange(count + 1) / rate


def _heading_pose(position: np.ndarray, heading: float, pitch: float = 0.0) -> Pose:
    rotation = rotation_about((0.0, 0.0, 1.0), heading)
    if pitch != 0.0:
        rotation = rotation @ rotation_about((0.0, 1.0, 0.0), -pitch)
    return Pose(rotation, position)


def generate_trajectory(config: ScenarioConfig) -> Trajectory:
    """
    C1-smooth car path sampled at the odometry rate.

    Loop shapes (loop, figure-eight, ramp-loop) cover exactly config.laps laps over config.duration and
    return to their start in the ground plane when laps is a whole number.
    The straight shape drives along +x at config.speed.
    """
    shape = config.trajectory_shape
    times = sample_times(config.duration, config.odometry_rate)
    phase = 2.0 * math.pi * config.laps * times / config.duration
    radius = config.radius
    poses: List[Pose] = []
    if shape is TrajectoryShape.STRAIGHT:
        for t in times:
            poses.append(_heading_pose(np.array([config.speed * t, 0.0, 0.0]), 0.0))
    elif shape in (TrajectoryShape.LOOP, TrajectoryShape.RAMP_LOOP):
        climb = config.ramp_height if shape is TrajectoryShape.RAMP_LOOP else 0.0
        pitch = math.atan2(climb, 2.0 * math.pi * radius)
        for phi in phase:
            position = np.array([radius * math.sin(phi), radius * (1.0 - math.cos(phi)), climb * phi / (2.0 * math.pi)])
            poses.append(_heading_pose(position, phi, pitch))
    elif shape is TrajectoryShape.FIGURE_EIGHT:
        for phi in phase:
            position = np.array([radius * math.sin(phi), 0.5 * radius * math.sin(2.0 * phi), 0.0])
            heading = math.atan2(math.cos(2.0 * phi), math.cos(phi))
            poses.append(_heading_pose(position, heading))
    logger.debug(f"Generated {shape.value} trajectory with {len(poses)} samples")
    return Trajectory(times, poses)
