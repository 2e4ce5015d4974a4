from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Set

import numpy as np

from .camera import CameraModel
from .data import ArgumentError, DegeneracyError, RansacFailure
from .ransac import RansacParams
from .simulator import CameraTracks
from .two_view import MIN_CORRESPONDENCES, estimate_relative_pose_up_to_scale

logger = logging.getLogger(__name__)


@dataclass
class FrontendParams:
    keyframe_fraction: float = 0.7
    keyframe_min_tracks: int = 20
    # [s]
    max_keyframe_interval: float = 0.5
    max_tracks: int = 40
    use_ransac: bool = True
    ransac: RansacParams = field(default_factory=RansacParams)


class FrameStats(NamedTuple):
    track_count: int
    mean_track_length: float = 0.0


class FeatureTrack:
    """ Keyframe observations of one landmark track seen by one camera. """

    def __init__(self, track_id: int, camera_id: int):
        self.track_id = track_id
        self.camera_id = camera_id
        self.observations: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.observations)

    def __repr__(self) -> str:
        return f"FeatureTrack(cam={self.camera_id}, id={self.track_id}, keyframes={sorted(self.observations)})"

    def add(self, keyframe_id: int, pixel: np.ndarray):
        assert keyframe_id not in self.observations, f"Track {self.track_id} already observed at keyframe {keyframe_id}"
        self.observations[keyframe_id] = np.array(pixel, dtype=float)


class FrontendOutput(NamedTuple):
    keyframe_id: int
    camera_id: int
    timestamp: float
    # track id -> pixel at this keyframe, inliers only
    observations: Dict[int, np.ndarray]
    stats: FrameStats
    rejected: List[int] = []


def select_keyframe(
    stats_now: FrameStats, stats_last_keyframe: FrameStats, elapsed: float, params: Optional[FrontendParams] = None
) -> bool:
    params = params or FrontendParams()
    if elapsed >= params.max_keyframe_interval:
        return True
    if stats_now.track_count < params.keyframe_min_tracks:
        return True
    return stats_now.track_count < params.keyframe_fraction * stats_last_keyframe.track_count


class CameraFrontend:
    """
    Track management for one camera.

    Tracks are followed frame to frame from the simulated tracklets; new tracks are only taken at
    keyframes, lowest track id first, up to max_tracks. At each keyframe the tracks shared with the
    previous keyframe are checked by essential-matrix RANSAC and outlier tracks are dropped for good.
    """

    def __init__(self, camera_id: int, cam: CameraModel, tracks: CameraTracks, params: Optional[FrontendParams] = None):
        self.camera_id = camera_id
        self.cam = cam
        self.source = tracks
        self.params = params or FrontendParams()
        self.tracks: Dict[int, FeatureTrack] = {}
        self.active: Set[int] = set()
        self.rejected: Set[int] = set()
        self.last_keyframe_stats = FrameStats(0)
        self.last_keyframe_time: Optional[float] = None
        self.last_keyframe_pixels: Dict[int, np.ndarray] = {}
        self._current: Dict[int, np.ndarray] = {}

    @property
    def is_active(self) -> bool:
        """ An occluded camera has no observations in the current frame and does not vote. """
        return len(self._current) > 0

    def _frame_stats(self) -> FrameStats:
        alive = [t for t in self.active if t in self._current]
        if not alive:
            return FrameStats(0)
        return FrameStats(len(alive), float(np.mean([len(self.tracks[t]) for t in alive])))

    async def process_frame(self, frame_index: int, timestamp: float) -> bool:
        """ Follows the active tracks into this frame; returns the keyframe vote. """
        ids, pixels = self.source.observations_at(frame_index)
        self._current = {int(t): px for t, px in zip(ids, pixels)}
        self.active &= set(self._current)
        if not self.is_active:
            return False
        if self.last_keyframe_time is None:
            return True
        return select_keyframe(
            self._frame_stats(), self.last_keyframe_stats, timestamp - self.last_keyframe_time, self.params
        )

    def _reject_outliers(self) -> List[int]:
        shared = sorted(t for t in self.active if t in self.last_keyframe_pixels)
        if not self.params.use_ransac or len(shared) < max(MIN_CORRESPONDENCES, self.params.ransac.min_inliers):
            return []
        pairs = np.array([[self.last_keyframe_pixels[t], self._current[t]] for t in shared])
        try:
            result = estimate_relative_pose_up_to_scale(pairs, self.cam, self.params.ransac)
        except (RansacFailure, ArgumentError, DegeneracyError) as e:
            logger.debug(f"Camera {self.camera_id}: RANSAC skipped, tracks pass through ({e})")
            return []
        keep = np.zeros(len(shared), dtype=bool)
        keep[result.inlier_ids] = True
        return [t for t, k in zip(shared, keep) if not k]

    async def make_keyframe(self, keyframe_id: int, timestamp: float) -> FrontendOutput:
        rejected = self._reject_outliers()
        self.active.difference_update(rejected)
        self.rejected.update(rejected)
        # track ids are never reused once a track leaves the image
        self.rejected.intersection_update(self._current)

        room = self.params.max_tracks - len(self.active)
        if room > 0:
            fresh = sorted(t for t in self._current if t not in self.active and t not in self.rejected)
            self.active.update(fresh[:room])

        observations: Dict[int, np.ndarray] = {}
        for track_id in sorted(self.active):
            track = self.tracks.get(track_id)
            if track is None:
                track = self.tracks[track_id] = FeatureTrack(track_id, self.camera_id)
            track.add(keyframe_id, self._current[track_id])
            observations[track_id] = track.observations[keyframe_id]

        for track_id in [t for t in self.tracks if t not in self.active]:
            del self.tracks[track_id]

        stats = self._frame_stats()
        self.last_keyframe_stats = stats
        self.last_keyframe_time = timestamp
        self.last_keyframe_pixels = dict(observations)
        if rejected:
            logger.debug(f"Camera {self.camera_id} keyframe {keyframe_id}: rejected {len(rejected)} outlier tracks")
        return FrontendOutput(keyframe_id, self.camera_id, timestamp, observations, stats, sorted(rejected))
