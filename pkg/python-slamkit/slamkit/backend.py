from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.linalg import pinvh

from .camera import CameraModel
from .data import ArgumentError, CoverageError, DegeneracyError, MeasurementKind
from .factors import Factor, MarginalFactor, PriorFactor, ProjectionFactor, RelativePoseFactor, RelativePoseMeasurement
from .frontend import FrontendOutput
from .geometry import Pose, between, hat, interpolate, right_jacobian, scale_motion, so3_log
from .optimizer import LevenbergMarquardtParams, Ordering, OptimizationResult, Values, levenberg_marquardt, linearize
from .scenario import Trajectory
from .simulator import IncrementLog
from .triangulation import triangulate

logger = logging.getLogger(__name__)

# estimator sigmas used when a scenario is noise-free, so information stays finite
NOMINAL_ODOMETRY_SIGMAS = (1e-3, 5e-3)
NOMINAL_PIXEL_SIGMA = 1.0
SNAP_EPSILON = 1e-9
MAX_GAP_PERIODS = 2.0

LandmarkKey = Tuple[int, int]


@dataclass
class BackendParams:
    # [s]
    horizon: float = 10.0
    prior_sigmas: Tuple[float, float] = (1e-3, 1e-3)
    use_external_odometry: bool = False
    robust: bool = True
    # triangulated landmarks are only accepted below this reprojection error, in pixel sigmas
    max_triangulation_error: float = 5.0
    min_landmark_depth: float = 0.1
    lm: LevenbergMarquardtParams = field(default_factory=LevenbergMarquardtParams)


def estimator_sigmas(sigmas: Sequence[float], nominal: Sequence[float] = NOMINAL_ODOMETRY_SIGMAS) -> Tuple[float, float]:
    return tuple(float(s) if s > 0 else float(n) for s, n in zip(sigmas, nominal))


def _snap(alpha: float) -> float:
    if abs(alpha) < SNAP_EPSILON:
        return 0.0
    if abs(alpha - 1.0) < SNAP_EPSILON:
        return 1.0
    return min(max(alpha, 0.0), 1.0)


def _propagate(covariance: np.ndarray, piece: Pose, q: np.ndarray) -> np.ndarray:
    """ First-order covariance of (X @ piece) from that of X, errors as (right rotation, local translation). """
    rd_t = piece.rotation.T
    f = np.zeros((6, 6))
    f[:3, :3] = rd_t
    f[3:, :3] = -rd_t @ hat(piece.translation)
    f[3:, 3:] = rd_t
    g = np.zeros((6, 6))
    g[:3, :3] = right_jacobian(so3_log(piece.rotation))
    g[3:, 3:] = rd_t
    return f @ covariance @ f.T + g @ q @ g.T


def chain_increments(
    log: IncrementLog,
    t0: float,
    t1: float,
    i: Hashable = 0,
    j: Hashable = 1,
    sigmas: Optional[Sequence[float]] = None,
) -> RelativePoseMeasurement:
    """
    Relative pose of the body between t0 and t1 from an increment log.

    Whole increments are composed, the increments cut by t0 or t1 contribute the interpolated
    fraction. Gaps of up to two sample periods are bridged by scaling the next increment.
    """
    if not t0 < t1:
        raise ArgumentError(f"Need t0 < t1, got {t0} and {t1}")
    n = len(log)
    if n == 0 or log.t0[0] > t0 + SNAP_EPSILON or log.t1[-1] < t1 - SNAP_EPSILON:
        raise CoverageError(f"Increment log does not cover [{t0}, {t1}]")
    s_rot, s_trans = estimator_sigmas(sigmas if sigmas is not None else log.sigmas)
    q = np.diag([s_rot ** 2] * 3 + [s_trans ** 2] * 3)
    period = log.period
    max_gap = MAX_GAP_PERIODS * period + SNAP_EPSILON

    result = Pose.identity()
    covariance = np.zeros((6, 6))
    k = max(int(np.searchsorted(log.t0, t0 + SNAP_EPSILON, side="right")) - 1, 0)
    cursor = t0
    while cursor < t1 - SNAP_EPSILON:
        if k < n and log.t1[k] <= cursor + SNAP_EPSILON:
            k += 1
            continue
        if k >= n:
            raise CoverageError(f"Increment log ends at {log.t1[-1]} before {t1}")
        a, b = float(log.t0[k]), float(log.t1[k])
        increment = log.increments[k]
        if a > cursor + SNAP_EPSILON:
            gap = min(a, t1) - cursor
            if gap > max_gap:
                raise CoverageError(f"Increment log has a {gap:.3f} s gap at {cursor:.3f}")
            fraction = gap / (b - a)
            piece = scale_motion(increment, fraction)
            end = cursor + gap
        else:
            alpha0 = _snap((cursor - a) / (b - a))
            alpha1 = _snap((min(b, t1) - a) / (b - a))
            fraction = alpha1 - alpha0
            if alpha0 == 0.0 and alpha1 == 1.0:
                piece = increment
            else:
                identity = Pose.identity()
                piece = between(interpolate(identity, increment, alpha0), interpolate(identity, increment, alpha1))
            end = b if alpha1 == 1.0 else min(b, t1)
        covariance = _propagate(covariance, piece, fraction * q)
        result = result @ piece
        cursor = end
    information = np.linalg.inv(covariance)
    information = 0.5 * (information + information.T)
    return RelativePoseMeasurement(i, j, result, information, MeasurementKind.ODOMETRY)


def prior_information(sigmas: Tuple[float, float]) -> np.ndarray:
    return np.diag([sigmas[0] ** -2] * 3 + [sigmas[1] ** -2] * 3)


class Window:
    """
    Fixed-lag smoothing problem: keyframe poses, triangulated landmarks and their factors.

    Projection factors of landmarks that are not triangulated yet wait in `pending`.
    """

    def __init__(self, horizon: float = 10.0):
        self.horizon = horizon
        self.timestamps: Dict[int, float] = {}
        self.values = Values()
        self.factors: List[Factor] = []
        self.pending: Dict[LandmarkKey, List[ProjectionFactor]] = {}
        self.cost_history: List[float] = []
        self.iterations = 0

    def copy(self) -> Window:
        w = Window(self.horizon)
        w.timestamps = dict(self.timestamps)
        w.values = self.values.copy()
        w.factors = list(self.factors)
        w.pending = {k: list(v) for k, v in self.pending.items()}
        w.cost_history = list(self.cost_history)
        w.iterations = self.iterations
        return w

    @property
    def keyframe_ids(self) -> List[int]:
        return list(self.timestamps)

    @property
    def newest_time(self) -> float:
        return max(self.timestamps.values())

    def exiting(self) -> List[int]:
        """ Keyframes older than the horizon. """
        if not self.timestamps:
            return []
        limit = self.newest_time - self.horizon
        return [k for k, t in self.timestamps.items() if t < limit - SNAP_EPSILON]

    @property
    def is_gauge_fixed(self) -> bool:
        return any(isinstance(f, (PriorFactor, MarginalFactor)) for f in self.factors)

    def projection_factors(self) -> List[ProjectionFactor]:
        return [f for f in self.factors if isinstance(f, ProjectionFactor)]


def optimize_window(w: Window, params: Optional[LevenbergMarquardtParams] = None) -> Window:
    assert w.is_gauge_fixed, "Window needs a prior or marginal factor before optimization"
    result: OptimizationResult = levenberg_marquardt(w.factors, w.values, params)
    updated = w.copy()
    updated.values = result.values
    updated.cost_history = result.cost_history
    updated.iterations = result.iterations
    return updated


def marginalize(w: Window, exiting: Sequence[int]) -> Tuple[Window, Optional[MarginalFactor]]:
    """
    Removes the exiting keyframes and returns the reduced window and the Gaussian prior they leave
    on the states they were connected to (dense Schur complement at the current estimate).

    Landmarks only observed by exiting keyframes are dropped with their factors. Landmarks left with
    fewer than two observing keyframes, or kept alive only by an earlier marginal prior, are
    marginalized together with the poses, so every remaining landmark has two in-window observers.
    """
    exiting_poses: Set[int] = set(exiting)
    if not exiting_poses:
        return w, None
    result = w.copy()

    retained_observers: Dict[LandmarkKey, Set[int]] = {}
    for f in result.projection_factors():
        if f.keyframe_id not in exiting_poses:
            retained_observers.setdefault(f.landmark, set()).add(f.keyframe_id)
    in_prior: Set[Hashable] = set()
    for f in result.factors:
        if isinstance(f, MarginalFactor):
            in_prior.update(f.point_keys)
    orphaned = {l for l in result.values.points if l not in retained_observers}
    dropped = orphaned - in_prior
    exiting_points = {l for l in result.values.points if len(retained_observers.get(l, ())) < 2} - dropped

    kept: List[Factor] = []
    leaving: List[Factor] = []
    for f in result.factors:
        if isinstance(f, ProjectionFactor) and f.landmark in dropped:
            continue
        if set(f.pose_keys) & exiting_poses or set(f.point_keys) & exiting_points:
            leaving.append(f)
        else:
            kept.append(f)

    marginal = None
    if leaving:
        leaving_poses = {k for f in leaving for k in f.pose_keys}
        leaving_points = {k for f in leaving for k in f.point_keys}
        boundary_poses = sorted(leaving_poses - exiting_poses)
        boundary_points = sorted(leaving_points - exiting_points)
        out_poses = sorted(leaving_poses & exiting_poses)
        out_points = sorted(leaving_points & exiting_points)
        ordering = Ordering(out_poses + boundary_poses, out_points + boundary_points)
        hessian, gradient, cost = linearize(leaving, result.values, ordering)
        hessian = hessian.toarray()
        out_idx = np.concatenate(
            [ordering.pose_indices(k) for k in out_poses] + [ordering.point_indices(k) for k in out_points]
        ).astype(int)
        keep_idx = np.concatenate(
            [np.zeros(0, dtype=int)]
            + [ordering.pose_indices(k) for k in boundary_poses]
            + [ordering.point_indices(k) for k in boundary_points]
        ).astype(int)
        if len(keep_idx):
            h_oo_inv = pinvh(hessian[np.ix_(out_idx, out_idx)])
            h_ko = hessian[np.ix_(keep_idx, out_idx)]
            h_marginal = hessian[np.ix_(keep_idx, keep_idx)] - h_ko @ h_oo_inv @ h_ko.T
            g_marginal = gradient[keep_idx] - h_ko @ h_oo_inv @ gradient[out_idx]
            constant = cost - float(gradient[out_idx] @ h_oo_inv @ gradient[out_idx])
            marginal = MarginalFactor(boundary_poses, boundary_points, result.values, h_marginal, g_marginal, constant)
            kept.append(marginal)

    result.factors = kept
    for k in exiting_poses:
        result.timestamps.pop(k, None)
        result.values.poses.pop(k, None)
    for l in dropped | exiting_points:
        result.values.points.pop(l, None)
    for l in list(result.pending):
        remaining = [f for f in result.pending[l] if f.keyframe_id not in exiting_poses]
        if remaining:
            result.pending[l] = remaining
        else:
            del result.pending[l]
    logger.debug(
        f"Marginalized keyframes {sorted(exiting_poses)}: dropped {len(dropped)} landmarks, "
        f"{len(exiting_points)} prior-only landmarks, {len(leaving)} factors summarized"
    )
    return result, marginal


class KeyframeDiagnostics(NamedTuple):
    timestamp: float
    factors_per_camera: Dict[int, int]
    cost: float
    iterations: int

    @property
    def factors_field(self) -> str:
        return ";".join(f"{cam}:{count}" for cam, count in sorted(self.factors_per_camera.items()))


class VioBackend:
    """
    Single fixed-lag smoother fed by every camera frontend plus the odometry increment streams.

    Keeps the online keyframe estimates, per-keyframe diagnostics and, for each keyframe, the
    estimated landmarks it observed expressed in its body frame.
    """

    def __init__(
        self,
        rig: Sequence[CameraModel],
        inertial: IncrementLog,
        initial_pose: Pose,
        params: Optional[BackendParams] = None,
        wheel: Optional[IncrementLog] = None,
        pixel_sigma: float = 1.0,
    ):
        self.rig = list(rig)
        self.inertial = inertial
        self.wheel = wheel
        self.initial_pose = initial_pose
        self.params = params or BackendParams()
        if self.params.use_external_odometry and wheel is None:
            raise ArgumentError("External odometry requested but no wheel odometry log given")
        self.pixel_sigma = pixel_sigma if pixel_sigma > 0 else NOMINAL_PIXEL_SIGMA
        self.window = Window(self.params.horizon)
        self.estimates: List[Tuple[float, Pose]] = []
        self.keyframe_times: Dict[int, float] = {}
        self.diagnostics: List[KeyframeDiagnostics] = []
        self.landmark_snapshots: Dict[int, Dict[LandmarkKey, np.ndarray]] = {}
        self.odometry_information: Dict[Tuple[int, int], np.ndarray] = {}
        self.deferred_triangulations = 0
        self._last_keyframe: Optional[int] = None

    def build_keyframe_factors(self, outputs: Sequence[FrontendOutput]) -> List[Factor]:
        """ Projection factors for every inlier observation of the epoch plus odometry (or the first-keyframe prior). """
        assert outputs, "A keyframe epoch needs at least one frontend output"
        keyframe_id = outputs[0].keyframe_id
        timestamp = outputs[0].timestamp
        factors: List[Factor] = []
        if self._last_keyframe is None:
            factors.append(PriorFactor(keyframe_id, self.initial_pose, prior_information(self.params.prior_sigmas)))
        else:
            t_prev = self.keyframe_times[self._last_keyframe]
            inertial = chain_increments(self.inertial, t_prev, timestamp, self._last_keyframe, keyframe_id)
            factors.append(RelativePoseFactor(inertial))
            if self.params.use_external_odometry:
                wheel = chain_increments(self.wheel, t_prev, timestamp, self._last_keyframe, keyframe_id)
                factors.append(RelativePoseFactor(wheel))
        for output in sorted(outputs, key=lambda o: o.camera_id):
            cam = self.rig[output.camera_id]
            for track_id, pixel in sorted(output.observations.items()):
                factors.append(
                    ProjectionFactor(
                        keyframe_id, (output.camera_id, track_id), output.camera_id, cam, pixel, self.pixel_sigma, self.params.robust
                    )
                )
        return factors

    def _try_triangulate(self, landmark: LandmarkKey, observations: List[ProjectionFactor]) -> Optional[np.ndarray]:
        cam = observations[0].cam
        pairs = [(cam.camera_pose(self.window.values.poses[f.keyframe_id]), f.pixel) for f in observations]
        try:
            point = triangulate(pairs, cam, robust=self.params.robust, pixel_sigma=self.pixel_sigma)
        except DegeneracyError:
            self.deferred_triangulations += 1
            return None
        limit = self.params.max_triangulation_error * self.pixel_sigma
        for camera_pose, pixel in pairs:
            p_cam = camera_pose.inverse_transform_points(point[None])[0]
            if p_cam[2] < self.params.min_landmark_depth:
                self.deferred_triangulations += 1
                return None
            projected, _ = cam.project_camera_points(p_cam[None])
            if np.linalg.norm(projected[0] - pixel) > limit:
                self.deferred_triangulations += 1
                return None
        return point

    def add_keyframe(self, outputs: Sequence[FrontendOutput]) -> Pose:
        """ Adds one keyframe epoch, optimizes the window, marginalizes what fell out of the horizon. """
        keyframe_id = outputs[0].keyframe_id
        timestamp = outputs[0].timestamp
        factors = self.build_keyframe_factors(outputs)
        w = self.window
        w.timestamps[keyframe_id] = timestamp
        self.keyframe_times[keyframe_id] = timestamp

        counts: Dict[int, int] = {o.camera_id: 0 for o in outputs}
        for f in factors:
            if isinstance(f, PriorFactor):
                w.values.poses[keyframe_id] = f.prior
                w.factors.append(f)
            elif isinstance(f, RelativePoseFactor):
                if keyframe_id not in w.values.poses:
                    w.values.poses[keyframe_id] = w.values.poses[f.measurement.i] @ f.measurement.transform
                    self.odometry_information[(f.measurement.i, keyframe_id)] = f.measurement.information
                w.factors.append(f)
        for f in factors:
            if not isinstance(f, ProjectionFactor):
                continue
            counts[f.camera_id] += 1
            if f.landmark in w.values.points:
                w.factors.append(f)
                continue
            waiting = w.pending.setdefault(f.landmark, [])
            waiting.append(f)
            if len(waiting) >= 2:
                point = self._try_triangulate(f.landmark, waiting)
                if point is not None:
                    w.values.points[f.landmark] = point
                    w.factors.extend(waiting)
                    del w.pending[f.landmark]

        self.window = optimize_window(w, self.params.lm)
        estimate = self.window.values.poses[keyframe_id]
        self.estimates.append((timestamp, estimate))
        self.diagnostics.append(
            KeyframeDiagnostics(timestamp, counts, self.window.cost_history[-1], self.window.iterations)
        )
        observed = {f.landmark for f in factors if isinstance(f, ProjectionFactor)}
        self.landmark_snapshots[keyframe_id] = {
            l: estimate.inverse_transform_points(self.window.values.points[l][None])[0]
            for l in sorted(observed)
            if l in self.window.values.points
        }
        self.window, _ = marginalize(self.window, self.window.exiting())
        self._last_keyframe = keyframe_id
        logger.debug(
            f"Keyframe {keyframe_id} t={timestamp:.2f}: {len(self.window.values.points)} landmarks, "
            f"cost {self.window.cost_history[-1]:.4g} after {self.window.iterations} iterations"
        )
        return estimate

    @property
    def trajectory(self) -> Trajectory:
        return Trajectory([t for t, _ in self.estimates], [p for _, p in self.estimates])
