from __future__ import annotations

import logging
from typing import Sequence, Tuple

import numpy as np

from .camera import CameraModel, projection_jacobians
from .data import ArgumentError, DegeneracyError
from .geometry import Pose

logger = logging.getLogger(__name__)

HUBER_K = 1.345
MAX_CONDITION = 1e8
ITERATIONS = 15


def _linear_triangulation(normalized: np.ndarray, poses: Sequence[Pose]) -> np.ndarray:
    rows = []
    for x, pose in zip(normalized, poses):
        world_to_camera = pose.inverse()
        projection = np.column_stack([world_to_camera.rotation, world_to_camera.translation])
        rows.append(x[0] * projection[2] - projection[0])
        rows.append(x[1] * projection[2] - projection[1])
    _, _, vt = np.linalg.svd(np.array(rows))
    homogeneous = vt[-1]
    if not np.all(np.isfinite(homogeneous)) or abs(homogeneous[3]) < 1e-12 * np.linalg.norm(homogeneous[:3]):
        raise DegeneracyError("Linear triangulation returned a point at infinity")
    return homogeneous[:3] / homogeneous[3]


def _huber_weights(errors: np.ndarray, k: float) -> np.ndarray:
    return np.where(errors <= k, 1.0, k / np.maximum(errors, 1e-300))


def triangulate(
    observations: Sequence[Tuple[Pose, Sequence[float]]],
    cam: CameraModel,
    robust: bool = False,
    pixel_sigma: float = 1.0,
) -> np.ndarray:
    """
    World point from >= 2 (camera pose, pixel) observations.

    DLT initialization refined by Gauss-Newton on the reprojection error, reweighted with a Huber
    kernel (threshold 1.345 pixel sigmas) when robust is set.

    :param observations: pairs of camera pose (camera -> world) and pixel
    :param cam: intrinsics used for every observation
    """
    if len(observations) < 2:
        raise ArgumentError(f"Triangulation needs at least 2 observations, got {len(observations)}")
    poses = [pose for pose, _ in observations]
    pixels = np.array([np.asarray(px, dtype=float) for _, px in observations])
    point = _linear_triangulation(cam.normalized(pixels), poses)

    pinhole = cam.with_extrinsic(Pose.identity())
    rotations = np.array([p.rotation for p in poses])
    translations = np.array([p.translation for p in poses])
    n = len(poses)
    k = HUBER_K * max(pixel_sigma, 1e-12)

    for _ in range(ITERATIONS):
        projected, _, _, jacobian = projection_jacobians(pinhole, rotations, translations, np.tile(point, (n, 1)))
        residual = projected - pixels
        weights = _huber_weights(np.linalg.norm(residual, axis=1), k) if robust else np.ones(n)
        j_weighted = jacobian * weights[:, None, None]
        h = np.einsum("nki,nkj->ij", j_weighted, jacobian)
        g = np.einsum("nki,nk->i", j_weighted, residual)
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(g))):
            raise DegeneracyError("Non-finite normal system in triangulation")
        if np.linalg.cond(h) > MAX_CONDITION:
            raise DegeneracyError(f"Rays are near-parallel (condition number {np.linalg.cond(h):.3g})")
        step = -np.linalg.solve(h, g)
        point = point + step
        if np.max(np.abs(step)) < 1e-12 * max(1.0, float(np.max(np.abs(point)))):
            break
    if not np.all(np.isfinite(point)):
        raise DegeneracyError("Triangulated point is not finite")
    return point
