from __future__ import annotations

import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P

from .camera import CameraModel, projection_jacobians
from .data import ArgumentError, DegeneracyError, RansacFailure
from .geometry import Pose, rigid_alignment
from .ransac import Ransac, RansacParams

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 6
GAUSS_NEWTON_ITERATIONS = 20


def p3p(bearings: np.ndarray, points: np.ndarray) -> List[Pose]:
    """
    Camera poses (camera -> world) consistent with three bearing / world point pairs.

    The depth ratios v = s3/s1 solve a quartic obtained by eliminating u = s2/s1 from the
    law-of-cosines system; every real positive root yields one candidate.
    """
    j1, j2, j3 = bearings
    p1, p2, p3 = points
    a2 = float(np.sum((p2 - p3) ** 2))
    b2 = float(np.sum((p1 - p3) ** 2))
    c2 = float(np.sum((p1 - p2) ** 2))
    if min(a2, b2, c2) < 1e-12:
        return []
    cos_a = float(j2 @ j3)
    cos_b = float(j1 @ j3)
    cos_g = float(j1 @ j2)

    numerator = np.array([-b2 + (c2 - a2), -2.0 * (c2 - a2) * cos_b, b2 + (c2 - a2)])
    denominator = np.array([-2.0 * b2 * cos_g, 2.0 * b2 * cos_a])
    rest = np.array([b2 - c2, 2.0 * c2 * cos_b, -c2])
    quartic = P.polyadd(
        P.polysub(b2 * P.polymul(numerator, numerator), 2.0 * b2 * cos_g * P.polymul(numerator, denominator)),
        P.polymul(rest, P.polymul(denominator, denominator)),
    )
    scale = np.max(np.abs(quartic))
    if scale == 0.0:
        return []
    quartic = P.polytrim(quartic / scale, tol=1e-14)
    if len(quartic) < 2:
        return []

    candidates: List[Pose] = []
    for root in P.polyroots(quartic):
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        v = float(root.real)
        d = float(P.polyval(v, denominator))
        if v <= 0.0 or abs(d) < 1e-12:
            continue
        u = float(P.polyval(v, numerator)) / d
        base = 1.0 + v * v - 2.0 * v * cos_b
        if u <= 0.0 or base <= 0.0:
            continue
        s1 = math.sqrt(b2 / base)
        s2, s3 = u * s1, v * s1
        # reject spurious roots introduced by the elimination
        residual = s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * cos_a - a2
        if abs(residual) > 1e-4 * a2:
            continue
        camera_points = np.array([s1 * j1, s2 * j2, s3 * j3])
        try:
            world_to_camera = rigid_alignment(points, camera_points)
        except DegeneracyError:
            continue
        candidates.append(world_to_camera.inverse())
    return candidates


def dlt_pnp(normalized: np.ndarray, points: np.ndarray) -> Pose:
    """
    Linear PnP on >= 6 points followed by projection onto SE(3).

    :param normalized: (N, 3) homogeneous normalized image coordinates
    :param points: (N, 3) world points
    :return: camera pose (camera -> world)
    """
    n = len(points)
    homogeneous = np.column_stack([points, np.ones(n)])
    rows = np.zeros((2 * n, 12))
    u, v = normalized[:, 0], normalized[:, 1]
    rows[0::2, 4:8] = -homogeneous
    rows[0::2, 8:12] = v[:, None] * homogeneous
    rows[1::2, 0:4] = homogeneous
    rows[1::2, 8:12] = -u[:, None] * homogeneous
    _, _, vt = np.linalg.svd(rows)
    projection = vt[-1].reshape(3, 4)
    a, b = projection[:, :3], projection[:, 3]
    tau = np.sign(np.linalg.det(a))
    if tau == 0:
        raise DegeneracyError("DLT projection matrix is singular")
    uu, s, vvt = np.linalg.svd(tau * a)
    rotation = uu @ vvt
    translation = (3.0 * tau / np.sum(s)) * b
    return Pose(rotation, translation).inverse()


def reprojection_errors(cam: CameraModel, camera_pose: Pose, pixels: np.ndarray, points: np.ndarray) -> np.ndarray:
    p_cam = camera_pose.inverse_transform_points(points)
    projected, in_front = cam.project_camera_points(p_cam)
    errors = np.linalg.norm(projected - pixels, axis=1)
    return np.where(in_front, errors, np.inf)


def refine_pose(cam: CameraModel, camera_pose: Pose, pixels: np.ndarray, points: np.ndarray) -> Tuple[Pose, float]:
    """ Gauss-Newton on the summed squared reprojection error; steps that increase the cost are halved. """
    pinhole = cam.with_extrinsic(Pose.identity())
    n = len(points)

    def evaluate(pose: Pose):
        rotations = np.broadcast_to(pose.rotation, (n, 3, 3))
        translations = np.broadcast_to(pose.translation, (n, 3))
        projected, depth, j_pose, _ = projection_jacobians(pinhole, rotations, translations, points)
        residual = projected - pixels
        cost = float(np.sum(residual ** 2)) if np.all(depth > 0) else math.inf
        return residual, j_pose, cost

    residual, jacobian, cost = evaluate(camera_pose)
    for _ in range(GAUSS_NEWTON_ITERATIONS):
        if not math.isfinite(cost):
            break
        j = jacobian.reshape(-1, 6)
        h = j.T @ j
        g = j.T @ residual.reshape(-1)
        try:
            step = -np.linalg.solve(h + 1e-12 * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        accepted = False
        for _ in range(10):
            candidate = camera_pose.retract(step)
            c_residual, c_jacobian, c_cost = evaluate(candidate)
            if c_cost <= cost:
                camera_pose, residual, jacobian = candidate, c_residual, c_jacobian
                converged = cost - c_cost <= 1e-14 * max(cost, 1.0) or np.max(np.abs(step)) < 1e-12
                cost = c_cost
                accepted = True
                break
            step = step / 2.0
        if not accepted or converged:
            break
    return camera_pose, cost


def solve_pnp_ransac(
    correspondences: Sequence[Tuple[Sequence[float], Sequence[float]]],
    cam: CameraModel,
    params: Optional[RansacParams] = None,
) -> Tuple[Pose, np.ndarray]:
    """
    :param correspondences: (pixel, world point) pairs
    :return: camera pose (camera -> frame of the points) and inlier indices
    """
    params = params or RansacParams(min_inliers=MIN_CORRESPONDENCES)
    if len(correspondences) < MIN_CORRESPONDENCES:
        raise ArgumentError(f"Need at least {MIN_CORRESPONDENCES} 2D-3D correspondences, got {len(correspondences)}")
    pixels = np.array([np.asarray(c[0], dtype=float) for c in correspondences])
    points = np.array([np.asarray(c[1], dtype=float) for c in correspondences])
    bearings = cam.bearings(pixels)

    ransac = Ransac(
        3,
        lambda sample: p3p(bearings[sample], points[sample]),
        lambda pose: reprojection_errors(cam, pose, pixels, points),
        params,
    )
    hypothesis, mask = ransac.run(len(points))
    best, best_cost = refine_pose(cam, hypothesis, pixels[mask], points[mask])
    if mask.sum() >= MIN_CORRESPONDENCES:
        try:
            linear = dlt_pnp(cam.normalized(pixels[mask]), points[mask])
            linear, linear_cost = refine_pose(cam, linear, pixels[mask], points[mask])
            if linear_cost < best_cost:
                best = linear
        except DegeneracyError:
            logger.debug("DLT refit skipped: degenerate consensus set")
    mask = reprojection_errors(cam, best, pixels, points) < params.threshold
    if mask.sum() < params.min_inliers:
        raise RansacFailure(f"Refined PnP keeps {int(mask.sum())} inliers, need {params.min_inliers}")
    if mask.sum() >= 3:
        best, _ = refine_pose(cam, best, pixels[mask], points[mask])
    return best, np.flatnonzero(mask)
