from __future__ import annotations

import logging
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraModel, projection_jacobians
from .data import ArgumentError, MeasurementKind
from .geometry import Pose, between, hat, right_jacobian_inverse, so3_log
from .optimizer import POINT_DIM, POSE_DIM, Linearization, Ordering, Values

""" Factor variants of the smoother and the pose graph.

Every residual is expressed in the decoupled chart, rotation block first. Costs are
sum of w * rho(r^T Omega r); Projection uses a Huber rho, the others are quadratic.
"""

logger = logging.getLogger(__name__)

HUBER_K = 1.345


def check_information(information: np.ndarray, tolerance: float = 1e-10) -> np.ndarray:
    information = np.asarray(information, dtype=float)
    if information.shape != (6, 6) or not np.all(np.isfinite(information)):
        raise ArgumentError(f"Information must be a finite 6x6 matrix, got shape {information.shape}")
    if not np.allclose(information, information.T, atol=tolerance * max(1.0, float(np.max(np.abs(information))))):
        raise ArgumentError("Information matrix is not symmetric")
    scale = max(1.0, float(np.max(np.abs(information))))
    if np.min(np.linalg.eigvalsh(information)) < -tolerance * scale:
        raise ArgumentError("Information matrix is not positive semi-definite")
    return information


class RelativePoseMeasurement:
    """
    Measured transform between states i and j, T_bar_ij ~ between(T_i, T_j).

    With a sensor offset E (pose of the sensor in the body frame) the measurement relates the
    sensor frames instead: T_bar_ij ~ between(T_i E, T_j E).
    """

    def __init__(
        self,
        i: Hashable,
        j: Hashable,
        transform: Pose,
        information: np.ndarray,
        kind: MeasurementKind = MeasurementKind.ODOMETRY,
        sensor_offset: Optional[Pose] = None,
    ):
        self.i = i
        self.j = j
        self.transform = transform
        self.information = check_information(information)
        self.kind = kind
        self.sensor_offset = sensor_offset

    def __repr__(self) -> str:
        return f"RelativePoseMeasurement({self.i} -> {self.j}, {self.kind.value}, {self.transform})"

    def with_information(self, information: np.ndarray) -> RelativePoseMeasurement:
        return RelativePoseMeasurement(self.i, self.j, self.transform, information, self.kind, self.sensor_offset)


def relative_pose_residual(measured: Pose, pose_i: Pose, pose_j: Pose) -> np.ndarray:
    """ [Log(R_bar^T R); R_bar^T (t - t_bar)] for (R, t) = between(pose_i, pose_j). """
    estimate = between(pose_i, pose_j)
    rt = measured.rotation.T
    return np.concatenate([so3_log(rt @ estimate.rotation), rt @ (estimate.translation - measured.translation)])


def relative_pose_jacobians(measured: Pose, pose_i: Pose, pose_j: Pose) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    estimate = between(pose_i, pose_j)
    rt = measured.rotation.T
    r_rot = so3_log(rt @ estimate.rotation)
    r = np.concatenate([r_rot, rt @ (estimate.translation - measured.translation)])
    jr_inv = right_jacobian_inverse(r_rot)
    ri_t = pose_i.rotation.T
    j_i = np.zeros((6, 6))
    j_j = np.zeros((6, 6))
    j_i[:3, :3] = -jr_inv @ pose_j.rotation.T @ pose_i.rotation
    j_j[:3, :3] = jr_inv
    j_i[3:, :3] = rt @ hat(estimate.translation)
    j_i[3:, 3:] = -rt @ ri_t
    j_j[3:, 3:] = rt @ ri_t
    return r, j_i, j_j


def _offset_chain(pose: Pose, offset: Pose) -> np.ndarray:
    """ d(sensor perturbation) / d(body perturbation) for sensor pose = pose @ offset. """
    m = np.eye(6)
    m[:3, :3] = offset.rotation.T
    m[3:, :3] = -pose.rotation @ hat(offset.translation)
    return m


class Factor:
    """ Base of the factor variants; subclasses implement residual_and_jacobians or override the batch calls. """

    weight: float = 1.0

    @property
    def pose_keys(self) -> List[Hashable]:
        return []

    @property
    def point_keys(self) -> List[Hashable]:
        return []

    def information(self) -> np.ndarray:
        raise NotImplementedError

    def residual_and_jacobians(self, values: Values) -> Tuple[np.ndarray, List[np.ndarray]]:
        """ Residual and one Jacobian block per key (pose keys first, then point keys). """
        raise NotImplementedError

    def residual(self, values: Values) -> np.ndarray:
        return self.residual_and_jacobians(values)[0]

    def squared_error(self, values: Values) -> float:
        r = self.residual(values)
        return float(r @ self.information() @ r)

    def cost(self, values: Values) -> float:
        return self.weight * self.squared_error(values)

    def indices(self, ordering: Ordering) -> np.ndarray:
        return np.concatenate(
            [ordering.pose_indices(k) for k in self.pose_keys] + [ordering.point_indices(k) for k in self.point_keys]
        )

    def linearize(self, values: Values, ordering: Ordering) -> Linearization:
        r, blocks = self.residual_and_jacobians(values)
        j = np.hstack(blocks)
        omega = self.weight * self.information()
        jt_omega = j.T @ omega
        return Linearization(
            self.indices(ordering)[None, :], (jt_omega @ j)[None], (jt_omega @ r)[None], float(r @ omega @ r)
        )

    @classmethod
    def cost_many(cls, factors: Sequence[Factor], values: Values) -> float:
        return float(sum(f.cost(values) for f in factors))

    @classmethod
    def linearize_many(cls, factors: Sequence[Factor], values: Values, ordering: Ordering) -> List[Linearization]:
        if not factors:
            return []
        lins = [f.linearize(values, ordering) for f in factors]
        by_dim: Dict[int, List[Linearization]] = {}
        for lin in lins:
            by_dim.setdefault(lin.indices.shape[1], []).append(lin)
        return [
            Linearization(
                np.concatenate([l.indices for l in group]),
                np.concatenate([l.hessians for l in group]),
                np.concatenate([l.gradients for l in group]),
                float(sum(l.cost for l in group)),
            )
            for group in by_dim.values()
        ]


class PriorFactor(Factor):
    def __init__(self, key: Hashable, prior: Pose, information: np.ndarray):
        self.key = key
        self.prior = prior
        self._information = check_information(information)

    def __repr__(self) -> str:
        return f"PriorFactor({self.key}, {self.prior})"

    @property
    def pose_keys(self) -> List[Hashable]:
        return [self.key]

    def information(self) -> np.ndarray:
        return self._information

    def residual_and_jacobians(self, values: Values) -> Tuple[np.ndarray, List[np.ndarray]]:
        pose = values.poses[self.key]
        rt = self.prior.rotation.T
        r_rot = so3_log(rt @ pose.rotation)
        r = np.concatenate([r_rot, rt @ (pose.translation - self.prior.translation)])
        j = np.zeros((6, 6))
        j[:3, :3] = right_jacobian_inverse(r_rot)
        j[3:, 3:] = rt
        return r, [j]


class RelativePoseFactor(Factor):
    """ Between factor for odometry and every loop-closure kind; weight is the GNC weight. """

    def __init__(self, measurement: RelativePoseMeasurement, weight: float = 1.0):
        self.measurement = measurement
        self.weight = float(weight)

    def __repr__(self) -> str:
        return f"RelativePoseFactor({self.measurement}, w={self.weight:.3f})"

    @property
    def pose_keys(self) -> List[Hashable]:
        return [self.measurement.i, self.measurement.j]

    def information(self) -> np.ndarray:
        return self.measurement.information

    def with_weight(self, weight: float) -> RelativePoseFactor:
        return RelativePoseFactor(self.measurement, weight)

    def residual_and_jacobians(self, values: Values) -> Tuple[np.ndarray, List[np.ndarray]]:
        m = self.measurement
        pose_i = values.poses[m.i]
        pose_j = values.poses[m.j]
        if m.sensor_offset is None:
            r, j_i, j_j = relative_pose_jacobians(m.transform, pose_i, pose_j)
            return r, [j_i, j_j]
        r, j_i, j_j = relative_pose_jacobians(m.transform, pose_i @ m.sensor_offset, pose_j @ m.sensor_offset)
        return r, [j_i @ _offset_chain(pose_i, m.sensor_offset), j_j @ _offset_chain(pose_j, m.sensor_offset)]

    def residual(self, values: Values) -> np.ndarray:
        m = self.measurement
        pose_i = values.poses[m.i]
        pose_j = values.poses[m.j]
        if m.sensor_offset is not None:
            pose_i, pose_j = pose_i @ m.sensor_offset, pose_j @ m.sensor_offset
        return relative_pose_residual(m.transform, pose_i, pose_j)


def huber(squared: np.ndarray, k: float = HUBER_K) -> Tuple[np.ndarray, np.ndarray]:
    """ rho(s) and rho'(s) of the Huber kernel on a squared whitened error s. """
    squared = np.asarray(squared, dtype=float)
    k2 = k * k
    inside = squared <= k2
    root = np.sqrt(np.maximum(squared, 1e-300))
    rho = np.where(inside, squared, 2.0 * k * root - k2)
    d_rho = np.where(inside, 1.0, k / root)
    return rho, d_rho


class ProjectionFactor(Factor):
    """
    Reprojection of a landmark into the camera of one keyframe.

    Linearized in batches per camera; the Huber threshold is applied to the sigma-normalized error.
    """

    def __init__(
        self, keyframe_id: Hashable, landmark: Hashable, camera_id: int, cam: CameraModel, pixel, sigma: float = 1.0, robust: bool = True
    ):
        self.keyframe_id = keyframe_id
        self.landmark = landmark
        self.camera_id = camera_id
        self.cam = cam
        self.pixel = np.asarray(pixel, dtype=float)
        self.sigma = float(sigma)
        self.robust = robust

    def __repr__(self) -> str:
        return f"ProjectionFactor(kf={self.keyframe_id}, landmark={self.landmark}, cam={self.camera_id})"

    @property
    def pose_keys(self) -> List[Hashable]:
        return [self.keyframe_id]

    @property
    def point_keys(self) -> List[Hashable]:
        return [self.landmark]

    def information(self) -> np.ndarray:
        return np.eye(2) / self.sigma ** 2

    def residual_and_jacobians(self, values: Values) -> Tuple[np.ndarray, List[np.ndarray]]:
        pose = values.poses[self.keyframe_id]
        pixels, _, j_pose, j_point = projection_jacobians(
            self.cam, pose.rotation[None], pose.translation[None], values.points[self.landmark][None]
        )
        return pixels[0] - self.pixel, [j_pose[0], j_point[0]]

    def cost(self, values: Values) -> float:
        s = self.squared_error(values)
        return float(huber(s)[0]) if self.robust else s

    @staticmethod
    def _batch(factors: Sequence[ProjectionFactor], values: Values):
        poses = [values.poses[f.keyframe_id] for f in factors]
        rotations = np.array([p.rotation for p in poses])
        translations = np.array([p.translation for p in poses])
        points = np.array([values.points[f.landmark] for f in factors])
        pixels = np.array([f.pixel for f in factors])
        sigmas = np.array([f.sigma for f in factors])
        robust = np.array([f.robust for f in factors])
        projected, _, j_pose, j_point = projection_jacobians(factors[0].cam, rotations, translations, points)
        residual = (projected - pixels) / sigmas[:, None]
        squared = np.sum(residual ** 2, axis=1)
        rho, d_rho = huber(squared)
        rho = np.where(robust, rho, squared)
        d_rho = np.where(robust, d_rho, 1.0)
        return residual, squared, rho, d_rho, j_pose / sigmas[:, None, None], j_point / sigmas[:, None, None]

    @staticmethod
    def _by_camera(factors: Sequence[ProjectionFactor]) -> List[List[ProjectionFactor]]:
        groups: Dict[int, List[ProjectionFactor]] = {}
        for f in factors:
            groups.setdefault(f.camera_id, []).append(f)
        return [groups[c] for c in sorted(groups)]

    @classmethod
    def cost_many(cls, factors: Sequence[ProjectionFactor], values: Values) -> float:
        total = 0.0
        for group in cls._by_camera(factors):
            total += float(np.sum(cls._batch(group, values)[2]))
        return total

    @classmethod
    def linearize_many(cls, factors: Sequence[ProjectionFactor], values: Values, ordering: Ordering) -> List[Linearization]:
        result = []
        for group in cls._by_camera(factors):
            residual, _, rho, d_rho, j_pose, j_point = cls._batch(group, values)
            j = np.concatenate([j_pose, j_point], axis=2)
            jt = np.transpose(j, (0, 2, 1)) * d_rho[:, None, None]
            hessians = jt @ j
            gradients = np.einsum("nij,nj->ni", jt, residual)
            pose_idx = np.array([ordering.pose_offsets[f.keyframe_id] for f in group])[:, None] + np.arange(POSE_DIM)
            point_idx = np.array([ordering.point_offsets[f.landmark] for f in group])[:, None] + np.arange(POINT_DIM)
            result.append(Linearization(np.hstack([pose_idx, point_idx]), hessians, gradients, float(np.sum(rho))))
        return result


class MarginalFactor(Factor):
    """
    Gaussian left behind by marginalization, fixed at its linearization point x0:

        cost = c0 + 2 g^T d + d^T H d,   d = local(x0, x) stacked over keys

    Pose blocks use the decoupled chart, point blocks are additive.
    """

    def __init__(
        self,
        pose_keys: Sequence[Hashable],
        point_keys: Sequence[Hashable],
        linearization_point: Values,
        hessian: np.ndarray,
        gradient: np.ndarray,
        constant: float = 0.0,
    ):
        self._pose_keys = list(pose_keys)
        self._point_keys = list(point_keys)
        self.x0 = Values(
            {k: linearization_point.poses[k] for k in self._pose_keys},
            {k: np.array(linearization_point.points[k]) for k in self._point_keys},
        )
        self.hessian = 0.5 * (hessian + hessian.T)
        self.gradient = np.asarray(gradient, dtype=float)
        self.constant = float(constant)
        assert self.hessian.shape == (self.dim, self.dim), f"{self.hessian.shape} vs dim {self.dim}"

    def __repr__(self) -> str:
        return f"MarginalFactor(poses={self._pose_keys}, points={len(self._point_keys)})"

    @property
    def pose_keys(self) -> List[Hashable]:
        return list(self._pose_keys)

    @property
    def point_keys(self) -> List[Hashable]:
        return list(self._point_keys)

    @property
    def dim(self) -> int:
        return POSE_DIM * len(self._pose_keys) + POINT_DIM * len(self._point_keys)

    def delta_and_jacobian(self, values: Values) -> Tuple[np.ndarray, np.ndarray]:
        deltas = []
        a = np.zeros((self.dim, self.dim))
        offset = 0
        for k in self._pose_keys:
            d = self.x0.poses[k].local(values.poses[k])
            a[offset : offset + 3, offset : offset + 3] = right_jacobian_inverse(d[:3])
            a[offset + 3 : offset + 6, offset + 3 : offset + 6] = np.eye(3)
            deltas.append(d)
            offset += POSE_DIM
        for k in self._point_keys:
            deltas.append(values.points[k] - self.x0.points[k])
            a[offset : offset + 3, offset : offset + 3] = np.eye(3)
            offset += POINT_DIM
        return (np.concatenate(deltas) if deltas else np.zeros(0)), a

    def cost(self, values: Values) -> float:
        d, _ = self.delta_and_jacobian(values)
        return float(self.constant + 2.0 * self.gradient @ d + d @ self.hessian @ d)

    def linearize(self, values: Values, ordering: Ordering) -> Linearization:
        d, a = self.delta_and_jacobian(values)
        cost = float(self.constant + 2.0 * self.gradient @ d + d @ self.hessian @ d)
        return Linearization(
            self.indices(ordering)[None, :], (a.T @ self.hessian @ a)[None], (a.T @ (self.hessian @ d + self.gradient))[None], cost
        )
