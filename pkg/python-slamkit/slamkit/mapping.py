from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Union

import numpy as np

from .data import ArgumentError, TrajectoryShape
from .homography import GroundHomography, backproject_mask, compute_ground_homography
from .mesh import GROUND_PLANE, Mesh, Plane, reconstruction_error
from .scenario import ScenarioConfig, Trajectory
from .simulator import Dataset
from .tsdf import FREE_FRACTION, TsdfGrid, extract_mesh, free_voxels, integrate

logger = logging.getLogger(__name__)


@dataclass
class MappingParams:
    voxel_size: float = 0.2
    truncation: float = 0.4
    free_fraction: float = FREE_FRACTION

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ArgumentError(f"Voxel size must be positive, got {self.voxel_size}")
        if self.truncation < self.voxel_size:
            raise ArgumentError(f"Truncation {self.truncation} must cover at least one voxel of {self.voxel_size}")


class RampSurface(NamedTuple):
    """ Helical road of the ramp-loop scenario: height grows by climb per lap around the loop center. """

    radius: float
    climb: float
    laps: float

    def distances(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        phase = np.arctan2(x, self.radius - y)
        turns = np.arange(-1, int(math.ceil(self.laps)) + 1)
        heights = self.climb * (phase[:, None] + 2.0 * math.pi * turns[None, :]) / (2.0 * math.pi)
        vertical = np.min(np.abs(z[:, None] - heights), axis=1)
        # the road has no bank; its slope at distance r from the center is climb / (2 pi r)
        r = np.maximum(np.hypot(x, y - self.radius), 1e-9)
        return vertical * np.cos(np.arctan(self.climb / (2.0 * math.pi * r)))


Surface = Union[Plane, RampSurface]


def ground_truth_surface(config: ScenarioConfig) -> Surface:
    if config.trajectory_shape is TrajectoryShape.RAMP_LOOP:
        return RampSurface(config.radius, config.ramp_height, config.laps)
    return GROUND_PLANE


class MapResult(NamedTuple):
    grid: TsdfGrid
    mesh: Mesh
    # (N, 3) centers of free voxels
    free_space: np.ndarray
    integrated_frames: int
    skipped_pixels: int

    def error_against(self, surface: Surface) -> float:
        return reconstruction_error(self.mesh, surface=surface)


def build_map(
    dataset: Dataset,
    trajectory: Trajectory,
    cameras: Optional[Sequence[int]] = None,
    params: Optional[MappingParams] = None,
) -> MapResult:
    """
    Ground free-space map from the simulated ground masks, placed with the poses of one trajectory.

    Ground observations are integrated in time order; those outside the trajectory span are skipped.
    """
    params = params or MappingParams()
    cameras = list(dataset.camera_ids if cameras is None else cameras)
    homographies: Dict[int, GroundHomography] = {c: compute_ground_homography(dataset.rig[c]) for c in cameras}
    grid = TsdfGrid(params.voxel_size, params.truncation)
    frames = 0
    skipped = 0
    for observation in sorted(dataset.ground_observations, key=lambda o: (o.timestamp, o.camera)):
        if observation.camera not in homographies or not trajectory.covers(observation.timestamp):
            continue
        body_pose = trajectory.pose_at(observation.timestamp)
        cam = dataset.rig[observation.camera]
        cloud, outside = backproject_mask(dataset.ground_pixels[observation.camera], homographies[observation.camera], body_pose)
        integrate(grid, cam.camera_pose(body_pose).translation, cloud)
        frames += 1
        skipped += outside
    mesh = extract_mesh(grid)
    free = free_voxels(grid, params.free_fraction)
    logger.info(f"Map: {frames} ground frames, {len(grid)} voxels, {len(free)} free, {mesh}")
    return MapResult(grid, mesh, free, frames, skipped)
