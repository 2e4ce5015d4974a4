from __future__ import annotations

import logging
import math
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .camera import CameraModel, default_rig
from .geometry import Pose
from .scenario import ScenarioConfig, Trajectory, generate_trajectory, sample_times

logger = logging.getLogger(__name__)

# Non-outlier pixel noise is clipped at this many sigmas in norm
NOISE_CLIP_SIGMAS = 5.0
MIN_FEATURE_DEPTH = 0.5

STREAM_LANDMARKS = 0
STREAM_INERTIAL = 1
STREAM_WHEEL = 2
STREAM_CAMERA_BASE = 8


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """ Independent generator per noise stream, so streams never perturb each other. """
    return np.random.default_rng([int(seed), int(stream)])


class IncrementLog:
    """ Timestamped body-frame relative poses: increment k moves the body from t0[k] to t1[k]. """

    def __init__(self, t0: Sequence[float], t1: Sequence[float], increments: Sequence[Pose], sigmas: Tuple[float, float]):
        self.t0 = np.asarray(t0, dtype=float)
        self.t1 = np.asarray(t1, dtype=float)
        self.increments: List[Pose] = list(increments)
        self.sigmas = (float(sigmas[0]), float(sigmas[1]))
        assert len(self.t0) == len(self.t1) == len(self.increments)

    def __len__(self) -> int:
        return len(self.increments)

    @property
    def period(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.median(self.t1 - self.t0))

    def compose_all(self) -> Pose:
        result = Pose.identity()
        for increment in self.increments:
            result = result @ increment
        return result


class CameraTracks:
    """
    Tracklets of one camera, stored as flat observation arrays sorted by frame then track id.

    Track ids are unique per camera; a track is one continuous visibility run of one landmark.
    """

    def __init__(
        self,
        frame: np.ndarray,
        track: np.ndarray,
        pixels: np.ndarray,
        is_outlier: np.ndarray,
        track_landmark: np.ndarray,
        frame_count: int,
    ):
        self.frame = np.asarray(frame, dtype=np.int64)
        self.track = np.asarray(track, dtype=np.int64)
        self.pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        self.is_outlier = np.asarray(is_outlier, dtype=bool)
        self.track_landmark = np.asarray(track_landmark, dtype=np.int64)
        self.frame_count = int(frame_count)
        self._offsets = np.searchsorted(self.frame, np.arange(self.frame_count + 1))

    def __len__(self) -> int:
        return len(self.track)

    @property
    def track_count(self) -> int:
        return len(self.track_landmark)

    def observations_at(self, frame_index: int) -> Tuple[np.ndarray, np.ndarray]:
        lo, hi = self._offsets[frame_index], self._offsets[frame_index + 1]
        return self.track[lo:hi], self.pixels[lo:hi]

    def tracklets(self, frame_times: np.ndarray) -> Dict[int, List[Tuple[float, np.ndarray]]]:
        """ track id -> [(timestamp, pixel)] """
        result: Dict[int, List[Tuple[float, np.ndarray]]] = {}
        for f, tr, px in zip(self.frame, self.track, self.pixels):
            result.setdefault(int(tr), []).append((float(frame_times[f]), px))
        return result


class GroundObservation(NamedTuple):
    timestamp: float
    camera: int
    points: np.ndarray


class Dataset:
    def __init__(
        self,
        config: ScenarioConfig,
        groundtruth: Trajectory,
        landmarks: np.ndarray,
        rig: List[CameraModel],
        frame_times: np.ndarray,
        tracks: Dict[int, CameraTracks],
        inertial: IncrementLog,
        wheel: IncrementLog,
        ground_pixels: Dict[int, np.ndarray],
        ground_observations: List[GroundObservation],
    ):
        self.config = config
        self.groundtruth = groundtruth
        self.landmarks = landmarks
        self.rig = rig
        self.frame_times = frame_times
        self.tracks = tracks
        self.inertial = inertial
        self.wheel = wheel
        self.ground_pixels = ground_pixels
        self.ground_observations = ground_observations

    @property
    def camera_ids(self) -> List[int]:
        return list(range(len(self.rig)))

    @property
    def odometry(self) -> IncrementLog:
        return self.inertial

    def groundtruth_at(self, timestamp: float) -> Pose:
        return self.groundtruth.pose_at(timestamp)

    def landmark_of(self, camera: int, track_id: int) -> int:
        return int(self.tracks[camera].track_landmark[track_id])


def generate_landmarks(traj: Trajectory, config: ScenarioConfig) -> np.ndarray:
    """ Landmarks spread uniformly along the path in a corridor on both sides, 0-5 m above the road. """
    rng = stream_rng(config.seed, STREAM_LANDMARKS)
    n = config.landmark_count
    if n == 0 or len(traj) < 2:
        return np.zeros((0, 3))
    positions = traj.positions
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(positions, axis=0), axis=1))])
    s = rng.uniform(0.0, arc[-1], n)
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    offset = rng.uniform(config.corridor[0], config.corridor[1], n)
    height = rng.uniform(config.landmark_heights[0], config.landmark_heights[1], n)
    times = np.interp(s, arc, traj.timestamps)
    points = np.zeros((n, 3))
    for k in range(n):
        pose = traj.pose_at(float(times[k]))
        left = pose.rotation[:, 1].copy()
        left[2] = 0.0
        left /= max(np.linalg.norm(left), 1e-12)
        points[k] = pose.translation + side[k] * offset[k] * left + np.array([0.0, 0.0, height[k]])
    return points


def simulate_increments(traj: Trajectory, sigmas: Tuple[float, float], rng: np.random.Generator) -> IncrementLog:
    """ Ground-truth between-poses perturbed by Gaussian noise on the decoupled tangent. """
    rotations = np.array([p.rotation for p in traj.poses])
    translations = np.array([p.translation for p in traj.poses])
    rel_rotations = np.einsum("nji,njk->nik", rotations[:-1], rotations[1:])
    rel_translations = np.einsum("nji,nj->ni", rotations[:-1], translations[1:] - translations[:-1])
    count = len(rel_rotations)
    rot_noise = rng.normal(0.0, 1.0, (count, 3)) * sigmas[0]
    trans_noise = rng.normal(0.0, 1.0, (count, 3)) * sigmas[1]
    if sigmas[0] > 0:
        rotvecs = ScipyRotation.from_matrix(rel_rotations).as_rotvec() + rot_noise
        rel_rotations = ScipyRotation.from_rotvec(rotvecs).as_matrix()
    rel_translations = rel_translations + trans_noise
    increments = [Pose(r, t) for r, t in zip(rel_rotations, rel_translations)]
    return IncrementLog(traj.timestamps[:-1], traj.timestamps[1:], increments, sigmas)


def ground_mask_pixels(cam: CameraModel, pixel_step: int, max_range: float) -> np.ndarray:
    """ Grid pixels whose viewing ray hits the body z=0 plane within max_range of the camera. """
    us = np.arange(pixel_step / 2.0, cam.width, pixel_step)
    vs = np.arange(pixel_step / 2.0, cam.height, pixel_step)
    grid = np.array([(u, v) for v in vs for u in us])
    rays = cam.normalized(grid) @ cam.extrinsic.rotation.T
    height = cam.extrinsic.translation[2]
    below = rays[:, 2] < -1e-9
    scale = np.where(below, -height / np.where(below, rays[:, 2], -1.0), np.inf)
    horizontal = scale * np.linalg.norm(rays[:, :2], axis=1)
    keep = below & (horizontal <= max_range)
    return grid[keep]


def ground_points_body(cam: CameraModel, pixels: np.ndarray) -> np.ndarray:
    """ Ray / body-plane intersections of ground pixels, in body coordinates. """
    if len(pixels) == 0:
        return np.zeros((0, 3))
    rays = cam.normalized(pixels) @ cam.extrinsic.rotation.T
    origin = cam.extrinsic.translation
    scale = -origin[2] / rays[:, 2]
    return origin + scale[:, None] * rays


def _simulate_camera(
    cam_id: int,
    cam: CameraModel,
    body_poses: List[Pose],
    frame_times: np.ndarray,
    landmarks: np.ndarray,
    config: ScenarioConfig,
) -> CameraTracks:
    rng = stream_rng(config.seed, STREAM_CAMERA_BASE + cam_id)
    n_landmarks = len(landmarks)
    active = -np.ones(n_landmarks, dtype=np.int64)
    track_landmark: List[int] = []
    frames: List[np.ndarray] = []
    tracks: List[np.ndarray] = []
    pixels_out: List[np.ndarray] = []
    outliers: List[np.ndarray] = []
    sigma = config.pixel_sigma
    low = np.zeros(2)
    high = np.array([cam.width, cam.height], dtype=float)

    for f, (t, body_pose) in enumerate(zip(frame_times, body_poses)):
        if n_landmarks == 0 or config.is_occluded(cam_id, float(t)):
            active[:] = -1
            continue
        p_cam = cam.world_to_camera(body_pose, landmarks)
        pixels, in_front = cam.project_camera_points(p_cam)
        visible = (
            in_front
            & (p_cam[:, 2] > MIN_FEATURE_DEPTH)
            & (np.linalg.norm(p_cam, axis=1) <= config.max_feature_range)
            & cam.in_image(pixels)
        )
        active[~visible] = -1
        fresh = np.flatnonzero(visible & (active < 0))
        if len(fresh):
            first = len(track_landmark)
            active[fresh] = first + np.arange(len(fresh))
            track_landmark.extend(fresh.tolist())
        ids = np.flatnonzero(visible)
        if len(ids) == 0:
            continue
        observed = pixels[ids]
        noise = rng.normal(0.0, 1.0, (len(ids), 2)) * sigma
        norms = np.linalg.norm(noise, axis=1)
        limit = NOISE_CLIP_SIGMAS * sigma
        too_far = norms > limit
        if np.any(too_far):
            noise[too_far] *= (limit / norms[too_far])[:, None]
        observed = observed + noise
        is_outlier = rng.random(len(ids)) < config.outlier_rate
        replacement = rng.uniform(low, high, (len(ids), 2))
        observed[is_outlier] = replacement[is_outlier]
        # keep noisy inliers inside the image
        observed = np.clip(observed, low, high - 1e-6)
        track_ids = active[ids]
        order = np.argsort(track_ids, kind="stable")
        frames.append(np.full(len(ids), f, dtype=np.int64))
        tracks.append(track_ids[order])
        pixels_out.append(observed[order])
        outliers.append(is_outlier[order])

    if frames:
        result = CameraTracks(
            np.concatenate(frames),
            np.concatenate(tracks),
            np.concatenate(pixels_out),
            np.concatenate(outliers),
            np.asarray(track_landmark, dtype=np.int64),
            len(frame_times),
        )
    else:
        result = CameraTracks(
            np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros(0), np.zeros(0), len(frame_times)
        )
    logger.debug(f"Camera {cam_id}: {result.track_count} tracks, {len(result)} observations")
    return result


def simulate_sensors(traj: Trajectory, config: ScenarioConfig, rig: Optional[List[CameraModel]] = None) -> Dataset:
    """
    Synthetic sensor log for a ground-truth trajectory.

    :param traj: ground truth sampled at the odometry rate
    :param config:
    :param rig: cameras, defaults to the 4-camera car rig
    """
    config.validate()
    rig = default_rig() if rig is None else rig
    assert len(traj) >= 2, "Trajectory needs at least two samples"
    landmarks = generate_landmarks(traj, config)

    frame_times = sample_times(traj.end_time - traj.start_time, config.camera_rate) + traj.start_time
    frame_times = frame_times[frame_times <= traj.end_time + 1e-9]
    body_poses = [traj.pose_at(float(t)) for t in frame_times]

    tracks = {
        cam_id: _simulate_camera(cam_id, cam, body_poses, frame_times, landmarks, config)
        for cam_id, cam in enumerate(rig)
    }
    inertial = simulate_increments(traj, config.odometry_sigmas, stream_rng(config.seed, STREAM_INERTIAL))
    wheel = simulate_increments(traj, config.wheel_sigmas, stream_rng(config.seed, STREAM_WHEEL))

    ground_pixels = {
        cam_id: ground_mask_pixels(cam, config.ground_pixel_step, config.ground_max_range)
        for cam_id, cam in enumerate(rig)
    }
    ground_body = {cam_id: ground_points_body(rig[cam_id], px) for cam_id, px in ground_pixels.items()}
    ground_observations: List[GroundObservation] = []
    for f in range(0, len(frame_times), config.ground_frame_stride):
        t = float(frame_times[f])
        for cam_id in range(len(rig)):
            if config.is_occluded(cam_id, t) or len(ground_body[cam_id]) == 0:
                continue
            ground_observations.append(GroundObservation(t, cam_id, body_poses[f].transform_points(ground_body[cam_id])))

    dataset = Dataset(
        config, traj, landmarks, rig, frame_times, tracks, inertial, wheel, ground_pixels, ground_observations
    )
    logger.info(
        f"Simulated {config.name}: {len(frame_times)} frames, {len(landmarks)} landmarks, "
        f"{sum(len(t) for t in tracks.values())} observations, {len(inertial)} increments"
    )
    return dataset


def simulate(config: ScenarioConfig, rig: Optional[List[CameraModel]] = None) -> Dataset:
    """ Ground truth and sensor log of a scenario. """
    return simulate_sensors(generate_trajectory(config.validate()), config, rig)
