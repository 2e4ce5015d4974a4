from __future__ import annotations

import math
from typing import Iterable, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .data import ArgumentError, ChartBoundaryError, DegeneracyError

""" SE(3) / SO(3) primitives.

Poses map body coordinates into the parent (world) frame: p_world = R @ p_body + t.
The tangent chart is decoupled: a twist is (omega, v) with omega = Log_SO3(R) and v = t,
rotation first, translation second. Every 6-vector and 6x6 matrix in the toolkit uses that order.
"""

EPSILON = 10 ** -12
# log_map refuses rotations this close to pi, where the axis flips
CHART_MARGIN = 1e-6
_SMALL_ANGLE = 1e-8

Vector3 = Union[np.ndarray, Tuple[float, float, float]]


def hat(v: Vector3) -> np.ndarray:
    """ Skew-symmetric matrix [v]x such that hat(v) @ w == cross(v, w). """
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def hat_many(v: np.ndarray) -> np.ndarray:
    """ Stacked hat for an (N, 3) array, returns (N, 3, 3). """
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega: Vector3) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    k = hat(omega)
    if theta2 < _SMALL_ANGLE ** 2:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = math.sqrt(theta2)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """
    :param rotation: 3x3 rotation matrix
    :return: rotation vector with norm < pi - CHART_MARGIN
    """
    omega = ScipyRotation.from_matrix(rotation).as_rotvec()
    angle = float(np.linalg.norm(omega))
    if angle >= math.pi - CHART_MARGIN:
        raise ChartBoundaryError(f"Rotation angle {angle} is too close to pi for the canonical chart")
    return omega


def right_jacobian(phi: Vector3) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    k = hat(phi)
    if theta2 < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    theta = math.sqrt(theta2)
    return np.eye(3) - (1.0 - math.cos(theta)) / theta2 * k + (theta - math.sin(theta)) / (theta2 * theta) * (k @ k)


def right_jacobian_inverse(phi: Vector3) -> np.ndarray:
    """ Jr^-1 with Log(Exp(phi) Exp(d)) ~= phi + Jr^-1(phi) d. """
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    k = hat(phi)
    if theta2 < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    theta = math.sqrt(theta2)
    coefficient = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * k + coefficient * (k @ k)


def is_rotation(matrix: np.ndarray, tolerance: float = 1e-9) -> bool:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (3, 3) or not np.all(np.isfinite(matrix)):
        return False
    return bool(
        np.allclose(matrix @ matrix.T, np.eye(3), atol=tolerance) and abs(np.linalg.det(matrix) - 1.0) < tolerance
    )


def rotation_angle(rotation: np.ndarray) -> float:
    """ Geodesic angle of a rotation matrix in radians, valid on the whole group. """
    return float(np.linalg.norm(ScipyRotation.from_matrix(rotation).as_rotvec()))


def rotation_about(axis: Vector3, angle: float) -> np.ndarray:
    axis = unit_vector(axis)
    return so3_exp(axis * angle)


def unit_vector(v: Vector3) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if not np.isfinite(norm) or norm < EPSILON:
        raise ArgumentError(f"Cannot normalize vector {v}")
    return v / norm


def check_unit_vector(v: Vector3, tolerance: float = 1e-12) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or abs(float(np.linalg.norm(v)) - 1.0) > tolerance:
        raise ArgumentError(f"Expected a unit-norm 3-vector, got {v}")
    return v


def angle_between(a: Vector3, b: Vector3) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


class Twist(NamedTuple):
    omega: np.ndarray
    v: np.ndarray

    @classmethod
    def from_vector(cls, x: Iterable[float]) -> Twist:
        x = np.asarray(x, dtype=float)
        assert x.shape == (6,), f"Twist vector must have 6 entries, got {x.shape}"
        return cls(x[:3].copy(), x[3:].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.v])


class Pose:
    """ Rigid transform on SE(3), immutable. """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Optional[np.ndarray] = None, translation: Optional[Vector3] = None):
        rotation = np.eye(3) if rotation is None else np.array(rotation, dtype=float)
        translation = np.zeros(3) if translation is None else np.array(translation, dtype=float).reshape(3)
        assert rotation.shape == (3, 3), f"rotation has shape {rotation.shape}"
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    def __setattr__(self, key, value):
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_quaternion(cls, quaternion_xyzw: Iterable[float], translation: Vector3) -> Pose:
        return cls(ScipyRotation.from_quat(np.asarray(quaternion_xyzw, dtype=float)).as_matrix(), translation)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> Pose:
        matrix = np.asarray(matrix, dtype=float)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def as_quaternion(self) -> np.ndarray:
        """ Unit quaternion (x, y, z, w) with w >= 0 so serialization is unique. """
        q = ScipyRotation.from_matrix(self.rotation).as_quat()
        if q[3] < 0:
            q = -q
        return q

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def is_valid(self) -> bool:
        return is_rotation(self.rotation) and bool(np.all(np.isfinite(self.translation)))

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def transform_point(self, point: Vector3) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """ Applies the pose to an (N, 3) array of points. """
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse_transform_points(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation

    def retract(self, delta: np.ndarray) -> Pose:
        """ Optimizer update: right perturbation on rotation, additive on translation. """
        return Pose(self.rotation @ so3_exp(delta[:3]), self.translation + delta[3:])

    def local(self, other: Pose) -> np.ndarray:
        """ Inverse of retract: the delta with self.retract(delta) == other. """
        return np.concatenate([so3_log(self.rotation.T @ other.rotation), other.translation - self.translation])

    def almost_equal(self, other: Pose, tolerance: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=tolerance, rtol=0)
            and np.allclose(self.translation, other.translation, atol=tolerance, rtol=0)
        )

    def __repr__(self) -> str:
        q = self.as_quaternion()
        t = self.translation
        return f"Pose(t=({t[0]:.4f}, {t[1]:.4f}, {t[2]:.4f}), q=({q[0]:.4f}, {q[1]:.4f}, {q[2]:.4f}, {q[3]:.4f}))"

    def __reduce__(self):
        return Pose, (np.array(self.rotation), np.array(self.translation))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    return a.inverse()


def between(a: Pose, b: Pose) -> Pose:
    """ inverse(a) composed with b, computed without forming the inverse explicitly. """
    rt = a.rotation.T
    return Pose(rt @ b.rotation, rt @ (b.translation - a.translation))


def log_map(p: Pose) -> Twist:
    return Twist(so3_log(p.rotation), np.array(p.translation))


def exp_map(x: Union[Twist, np.ndarray]) -> Pose:
    if not isinstance(x, Twist):
        x = Twist.from_vector(x)
    return Pose(so3_exp(x.omega), x.v)


def interpolate(a: Pose, b: Pose, alpha: float) -> Pose:
    """ Geodesic on rotation, linear on translation. Exact at both endpoints. """
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError(f"Interpolation factor {alpha} outside [0, 1]")
    if alpha == 0.0:
        return a
    if alpha == 1.0:
        return b
    delta = so3_log(a.rotation.T @ b.rotation)
    return Pose(a.rotation @ so3_exp(alpha * delta), (1.0 - alpha) * a.translation + alpha * b.translation)


def scale_motion(p: Pose, factor: float) -> Pose:
    """ exp_map(factor * log_map(p)); used to bridge short gaps in increment logs. """
    return Pose(so3_exp(factor * so3_log(p.rotation)), factor * p.translation)


def rigid_alignment(source: np.ndarray, target: np.ndarray) -> Pose:
    """
    Closed-form rigid transform (no scale) minimizing sum |target_i - (R source_i + t)|^2.

    :param source: (N, 3) points
    :param target: (N, 3) points
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    assert source.shape == target.shape and source.shape[1] == 3, f"{source.shape} vs {target.shape}"
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    rotation = rotation_alignment(source - mu_s, target - mu_t)
    return Pose(rotation, mu_t - rotation @ mu_s)


def rotation_alignment(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """ Rotation R minimizing sum |target_i - R source_i|^2 (orthogonal Procrustes with reflection fix). """
    cross_covariance = np.asarray(target).T @ np.asarray(source)
    u, s, vt = np.linalg.svd(cross_covariance)
    if s[1] < EPSILON * max(1.0, s[0]):
        raise DegeneracyError(f"Point sets are degenerate for alignment, singular values {s}")
    d = np.sign(np.linalg.det(u @ vt))
    correction = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    return u @ correction @ vt
