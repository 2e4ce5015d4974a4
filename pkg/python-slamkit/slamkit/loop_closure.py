from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraModel
from .data import LoopMode, MeasurementKind, SlamError
from .factors import RelativePoseMeasurement
from .geometry import Pose, angle_between, between, check_unit_vector, rotation_angle, unit_vector
from .pnp import MIN_CORRESPONDENCES as PNP_MIN_CORRESPONDENCES
from .pnp import solve_pnp_ransac
from .ransac import RansacParams
from .simulator import Dataset
from .two_view import estimate_relative_pose_up_to_scale

logger = logging.getLogger(__name__)

STREAM_FALSE_POSITIVES = 7
STREAM_PNP_SUBSAMPLE = 9


@dataclass
class LoopClosureParams:
    # place recognition oracle
    radius: float = 5.0
    max_angle_deg: float = 30.0
    # [s]
    min_separation: float = 10.0
    min_inliers: int = 8
    rotation_sigma: float = 0.02
    translation_sigma: float = 0.1
    pnp_landmark_fraction: float = 0.25
    # injected false positives reuse the correspondences of a keyframe this far before the query [s]
    false_positive_offset: float = 0.5
    ransac: RansacParams = field(default_factory=RansacParams)

    @property
    def rotation_information(self) -> np.ndarray:
        return np.eye(3) / self.rotation_sigma ** 2


class LoopCandidate(NamedTuple):
    query: int
    match: int
    query_time: float
    match_time: float
    # (N, 2, 2): pixel in the match frame, pixel in the query frame
    pairs: np.ndarray
    # pixel in the query frame, 3D point in the match body frame
    points: List[Tuple[np.ndarray, np.ndarray]]
    is_injected_false_positive: bool = False


class LoopResult(NamedTuple):
    candidate: LoopCandidate
    mode: LoopMode
    measurement: Optional[RelativePoseMeasurement]
    num_inliers: int
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return self.measurement is not None


def frame_index(dataset: Dataset, timestamp: float) -> int:
    return int(round((timestamp - float(dataset.frame_times[0])) * dataset.config.camera_rate))


def _frame_landmarks(dataset: Dataset, camera_id: int, timestamp: float) -> Dict[int, np.ndarray]:
    """ landmark id -> observed pixel of one camera frame """
    tracks = dataset.tracks[camera_id]
    ids, pixels = tracks.observations_at(frame_index(dataset, timestamp))
    return {int(tracks.track_landmark[t]): px for t, px in zip(ids, pixels)}


def _snapshot_points(dataset: Dataset, snapshot: Dict[Tuple[int, int], np.ndarray]) -> Dict[int, np.ndarray]:
    """ Backend landmark snapshot re-keyed by landmark id; the lowest camera id wins on duplicates. """
    points: Dict[int, np.ndarray] = {}
    for (cam, track), point in sorted(snapshot.items()):
        points.setdefault(dataset.landmark_of(cam, track), point)
    return points


def assemble_correspondences(
    dataset: Dataset,
    camera_id: int,
    query_time: float,
    source_time: float,
    snapshot: Optional[Dict[Tuple[int, int], np.ndarray]],
    fraction: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
    query = _frame_landmarks(dataset, camera_id, query_time)
    source = _frame_landmarks(dataset, camera_id, source_time)
    shared = sorted(set(query) & set(source))
    pairs = np.array([[source[l], query[l]] for l in shared]).reshape(-1, 2, 2)
    points: List[Tuple[np.ndarray, np.ndarray]] = []
    if snapshot:
        available = _snapshot_points(dataset, snapshot)
        ids = sorted(available)
        keep = int(math.floor(fraction * len(ids)))
        chosen = sorted(rng.choice(ids, keep, replace=False).tolist()) if keep else []
        points = [(query[l], available[l]) for l in chosen if l in query]
    return pairs, points


def detect_candidates(
    dataset: Dataset,
    keyframes: Sequence[Tuple[int, float]],
    params: Optional[LoopClosureParams] = None,
    camera_id: int = 0,
    landmark_snapshots: Optional[Dict[int, Dict[Tuple[int, int], np.ndarray]]] = None,
) -> List[LoopCandidate]:
    """
    Place recognition stand-in: ground-truth proximity plus injected false positives.

    :param keyframes: (keyframe id, timestamp) in time order
    :param camera_id: the loop camera whose frames are matched
    :param landmark_snapshots: backend landmarks per keyframe in its body frame, for PnP
    """
    params = params or LoopClosureParams()
    snapshots = landmark_snapshots or {}
    seed = dataset.config.seed
    fp_rate = dataset.config.false_positive_rate
    poses = [dataset.groundtruth_at(t) for _, t in keyframes]
    positions = np.array([p.translation for p in poses]).reshape(-1, 3)
    times = np.array([t for _, t in keyframes])
    max_angle = math.radians(params.max_angle_deg)
    candidates: List[LoopCandidate] = []

    for q, (query_id, query_time) in enumerate(keyframes):
        earlier = np.flatnonzero(times <= query_time - params.min_separation)
        if len(earlier):
            distances = np.linalg.norm(positions[earlier] - positions[q], axis=1)
            close = [
                (d, m)
                for d, m in zip(distances, earlier)
                if d <= params.radius and rotation_angle(poses[m].rotation.T @ poses[q].rotation) <= max_angle
            ]
            if close:
                _, m = min(close)
                match_id, match_time = keyframes[m]
                rng = np.random.default_rng([seed, STREAM_PNP_SUBSAMPLE, q, int(m)])
                pairs, points = assemble_correspondences(
                    dataset, camera_id, query_time, match_time, snapshots.get(match_id), params.pnp_landmark_fraction, rng
                )
                if len(pairs):
                    candidates.append(LoopCandidate(query_id, match_id, query_time, match_time, pairs, points))

        if fp_rate > 0:
            rng = np.random.default_rng([seed, STREAM_FALSE_POSITIVES, q])
            if rng.random() >= fp_rate:
                continue
            far = [
                int(m)
                for m in np.flatnonzero(times <= query_time - params.min_separation)
                if np.linalg.norm(positions[m] - positions[q]) > 2.0 * params.radius
            ]
            aliased = np.flatnonzero(times <= query_time - params.false_positive_offset + 1e-9)
            if not far or not len(aliased):
                continue
            m = far[int(rng.integers(len(far)))]
            a = int(aliased[-1])
            alias_id, alias_time = keyframes[a]
            pairs, points = assemble_correspondences(
                dataset, camera_id, query_time, alias_time, snapshots.get(alias_id), params.pnp_landmark_fraction, rng
            )
            if len(pairs):
                match_id, match_time = keyframes[m]
                candidates.append(LoopCandidate(query_id, match_id, query_time, match_time, pairs, points, True))

    injected = sum(c.is_injected_false_positive for c in candidates)
    logger.info(f"Place recognition: {len(candidates)} loop candidates ({injected} injected false positives)")
    return candidates


def build_information(
    mode: LoopMode,
    direction: np.ndarray,
    rotation: np.ndarray,
    rotation_information: np.ndarray,
    translation_sigma: float = 0.1,
) -> np.ndarray:
    """
    6x6 information of a loop measurement, rotation block first.

    The scale-less translation block is the projector removing the measured direction, expressed in
    the residual frame: R^T (I - t t^T) R.
    """
    direction = check_unit_vector(direction, tolerance=1e-9)
    information = np.zeros((6, 6))
    information[:3, :3] = rotation_information
    if mode is LoopMode.SCALELESS:
        projector = np.eye(3) - np.outer(direction, direction)
        information[3:, 3:] = rotation.T @ projector @ rotation
    elif mode is LoopMode.PNP:
        information[3:, 3:] = np.eye(3) / translation_sigma ** 2
    return 0.5 * (information + information.T)


def _direction(translation: np.ndarray) -> np.ndarray:
    if np.linalg.norm(translation) < 1e-12:
        return np.array([1.0, 0.0, 0.0])
    return unit_vector(translation)


def compute_loop_pose(
    c: LoopCandidate, mode: LoopMode, cam: CameraModel, params: Optional[LoopClosureParams] = None
) -> LoopResult:
    """
    Loop-closure measurement between the match (i) and query (j) keyframes.

    2D-2D modes relate the loop camera frames and carry the camera extrinsic as sensor offset;
    PnP results are converted to the body frames.
    """
    params = params or LoopClosureParams()
    ransac = RansacParams(
        params.ransac.max_iterations, params.ransac.threshold, params.min_inliers, params.ransac.confidence, params.ransac.seed
    )
    try:
        if mode is LoopMode.PNP:
            if len(c.points) < PNP_MIN_CORRESPONDENCES:
                return LoopResult(c, mode, None, len(c.points), "too few 2D-3D matches")
            camera_in_match_body, inliers = solve_pnp_ransac(c.points, cam, ransac)
            transform = camera_in_match_body @ cam.extrinsic.inverse()
            information = build_information(
                mode, _direction(transform.translation), transform.rotation, params.rotation_information, params.translation_sigma
            )
            measurement = RelativePoseMeasurement(c.match, c.query, transform, information, mode.kind)
            return LoopResult(c, mode, measurement, len(inliers))

        relative = estimate_relative_pose_up_to_scale(c.pairs, cam, ransac)
        if mode is LoopMode.SCALELESS and relative.degenerate:
            return LoopResult(c, mode, None, len(relative.inlier_ids), "baseline too small for a direction")
        transform = Pose(relative.rotation, relative.direction)
        information = build_information(
            mode, relative.direction, relative.rotation, params.rotation_information, params.translation_sigma
        )
        measurement = RelativePoseMeasurement(c.match, c.query, transform, information, mode.kind, cam.extrinsic)
        return LoopResult(c, mode, measurement, len(relative.inlier_ids))
    except SlamError as e:
        return LoopResult(c, mode, None, 0, f"{type(e).__name__}: {e}")


def loop_errors(measurement: RelativePoseMeasurement, pose_i: Pose, pose_j: Pose) -> Tuple[float, float]:
    """
    Rotation error [deg] and translation error of a loop measurement against ground truth:
    direction angle [deg] for scale-less and rotation-only measurements, meters for full ones.
    """
    if measurement.sensor_offset is not None:
        pose_i = pose_i @ measurement.sensor_offset
        pose_j = pose_j @ measurement.sensor_offset
    truth = between(pose_i, pose_j)
    rot_err = math.degrees(rotation_angle(truth.rotation.T @ measurement.transform.rotation))
    if measurement.kind is MeasurementKind.LOOP_FULL:
        return rot_err, float(np.linalg.norm(truth.translation - measurement.transform.translation))
    if np.linalg.norm(truth.translation) < 1e-12:
        return rot_err, 0.0
    return rot_err, math.degrees(angle_between(truth.translation, measurement.transform.translation))


@dataclass
class LoopStatistics:
    candidates: int = 0
    accepted: int = 0
    rejected: int = 0
    injected: int = 0
    inliers: List[int] = field(default_factory=list)

    def add(self, result: LoopResult):
        self.candidates += 1
        self.injected += int(result.candidate.is_injected_false_positive)
        if result.accepted:
            self.accepted += 1
            self.inliers.append(result.num_inliers)
        else:
            self.rejected += 1

    @property
    def median_inliers(self) -> float:
        return float(np.median(self.inliers)) if self.inliers else 0.0

    def to_dict(self) -> Dict[str, float]:
        return {
            "candidates": self.candidates,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "injected": self.injected,
            "median_inliers": self.median_inliers,
        }
