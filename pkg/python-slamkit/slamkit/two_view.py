from __future__ import annotations

import logging
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .camera import CameraModel
from .data import ArgumentError
from .geometry import angle_between, rotation_alignment, unit_vector
from .ransac import Ransac, RansacParams

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 8
# median parallax below which the translation direction is flagged unreliable [deg]
DEGENERATE_PARALLAX_DEG = 0.5

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class RelativePoseUpToScale(NamedTuple):
    """ Pose of the second view in the frame of the first, with translation known up to scale. """

    rotation: np.ndarray
    direction: np.ndarray
    inlier_ids: np.ndarray
    degenerate: bool


def _normalizing_transform(points: np.ndarray) -> np.ndarray:
    centroid = points.mean(axis=0)
    spread = np.mean(np.linalg.norm(points - centroid, axis=1))
    s = math.sqrt(2.0) / spread if spread > 1e-15 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """
    Normalized eight-point estimate of E with x2^T E x1 = 0.

    :param x1: (N, 3) homogeneous normalized image coordinates in view 1
    :param x2: (N, 3) in view 2
    """
    t1 = _normalizing_transform(x1[:, :2])
    t2 = _normalizing_transform(x2[:, :2])
    a = x1 @ t1.T
    b = x2 @ t2.T
    system = np.column_stack(
        [
            b[:, 0] * a[:, 0], b[:, 0] * a[:, 1], b[:, 0] * a[:, 2],
            b[:, 1] * a[:, 0], b[:, 1] * a[:, 1], b[:, 1] * a[:, 2],
            b[:, 2] * a[:, 0], b[:, 2] * a[:, 1], b[:, 2] * a[:, 2],
        ]
    )
    _, _, vt = np.linalg.svd(system)
    e_normalized = vt[-1].reshape(3, 3)
    e = t2.T @ e_normalized @ t1
    # project onto the essential manifold: two equal singular values, third zero
    u, s, vt = np.linalg.svd(e)
    sigma = (s[0] + s[1]) / 2.0
    e = u @ np.diag([sigma, sigma, 0.0]) @ vt
    return e / np.linalg.norm(e)


def symmetric_epipolar_distance(e: np.ndarray, px1: np.ndarray, px2: np.ndarray, cam: CameraModel) -> np.ndarray:
    """ sqrt(d(x2, F x1)^2 + d(x1, F^T x2)^2) in pixels. """
    k_inv = cam.intrinsic_matrix_inverse
    f = k_inv.T @ e @ k_inv
    h1 = np.column_stack([px1, np.ones(len(px1))])
    h2 = np.column_stack([px2, np.ones(len(px2))])
    l2 = h1 @ f.T
    l1 = h2 @ f
    algebraic = np.sum(h2 * l2, axis=1)
    d2 = algebraic ** 2 / np.maximum(l2[:, 0] ** 2 + l2[:, 1] ** 2, 1e-300)
    d1 = algebraic ** 2 / np.maximum(l1[:, 0] ** 2 + l1[:, 1] ** 2, 1e-300)
    return np.sqrt(d1 + d2)


def decompose_essential(e: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """ The four (R, t) with E ~ [t]x R, where x2 = R x1 + t. """
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    r1 = u @ _W @ vt
    r2 = u @ _W.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def triangulate_depths(rotation: np.ndarray, translation: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """ Depths along bearings b1 (view 1) and b2 (view 2) for x2 = R x1 + t, midpoint least squares. """
    rb1 = b1 @ rotation.T
    # solve d1 * R b1 - d2 * b2 = -t per correspondence
    a11 = np.sum(rb1 * rb1, axis=1)
    a12 = -np.sum(rb1 * b2, axis=1)
    a22 = np.sum(b2 * b2, axis=1)
    r1 = -rb1 @ translation
    r2 = b2 @ translation
    det = a11 * a22 - a12 * a12
    safe = np.where(np.abs(det) > 1e-15, det, np.nan)
    d1 = (r1 * a22 - a12 * r2) / safe
    d2 = (a11 * r2 - a12 * r1) / safe
    return d1, d2


def _choose_decomposition(e: np.ndarray, b1: np.ndarray, b2: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    best = None
    best_count = -1
    for rotation, translation in decompose_essential(e):
        d1, d2 = triangulate_depths(rotation, translation, b1, b2)
        count = int(np.sum((d1 > 0) & (d2 > 0)))
        if count > best_count:
            best, best_count = (rotation, translation), count
    return best


def estimate_relative_pose_up_to_scale(
    correspondences: Sequence[Tuple[Sequence[float], Sequence[float]]],
    cam: CameraModel,
    params: Optional[RansacParams] = None,
) -> RelativePoseUpToScale:
    """
    Relative pose between two views of the same camera.

    :param correspondences: (pixel in view 1, pixel in view 2) pairs, or an (N, 2, 2) array
    :return: pose of view 2 in the frame of view 1; direction is unit norm
    """
    params = params or RansacParams()
    pairs = np.asarray(correspondences, dtype=float).reshape(-1, 2, 2)
    if len(pairs) < MIN_CORRESPONDENCES:
        raise ArgumentError(f"Need at least {MIN_CORRESPONDENCES} correspondences, got {len(pairs)}")
    px1, px2 = pairs[:, 0], pairs[:, 1]
    x1 = cam.normalized(px1)
    x2 = cam.normalized(px2)

    ransac = Ransac(
        MIN_CORRESPONDENCES,
        lambda sample: [eight_point(x1[sample], x2[sample])],
        lambda e: symmetric_epipolar_distance(e, px1, px2, cam),
        params,
    )
    _, mask = ransac.run(len(pairs))
    e = eight_point(x1[mask], x2[mask])
    errors = symmetric_epipolar_distance(e, px1, px2, cam)
    refit_mask = errors < params.threshold
    if refit_mask.sum() >= params.min_inliers:
        mask = refit_mask
    inlier_ids = np.flatnonzero(mask)

    b1 = x1[mask] / np.linalg.norm(x1[mask], axis=1, keepdims=True)
    b2 = x2[mask] / np.linalg.norm(x2[mask], axis=1, keepdims=True)
    # rotation-only fit: b2 ~ R b1
    rotation_only = rotation_alignment(b1, b2)
    residual_angles = np.degrees(np.arccos(np.clip(np.sum((b1 @ rotation_only.T) * b2, axis=1), -1.0, 1.0)))
    if float(np.median(residual_angles)) < DEGENERATE_PARALLAX_DEG:
        rotation_e, translation = _choose_decomposition(e, b1, b2)
        logger.debug(f"Two-view motion is rotation-only (median residual {np.median(residual_angles):.3f} deg)")
        return RelativePoseUpToScale(rotation_only.T, unit_vector(-rotation_e.T @ translation), inlier_ids, True)

    rotation, translation = _choose_decomposition(e, b1, b2)
    # parallax between the two rays of each correspondence, in the frame of view 1
    parallax = np.array([math.degrees(angle_between(a, rotation.T @ b)) for a, b in zip(b1, b2)])
    degenerate = float(np.median(parallax)) < DEGENERATE_PARALLAX_DEG
    # x2 = R x1 + t  =>  pose of view 2 in view 1 is (R^T, -R^T t)
    return RelativePoseUpToScale(rotation.T, unit_vector(-rotation.T @ translation), inlier_ids, degenerate)
