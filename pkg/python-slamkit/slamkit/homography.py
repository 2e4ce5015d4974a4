from __future__ import annotations

import logging
import math
from typing import NamedTuple, Union

import numpy as np

from .camera import CameraModel
from .data import DegeneracyError
from .geometry import Pose
from .ground_mask import GroundMask

logger = logging.getLogger(__name__)

# smallest angle between the optical axis and the ground plane [rad]
MIN_AXIS_ANGLE = 1e-6
MIN_CAMERA_HEIGHT = 1e-9
# pixels closer than this to the vanishing line (in line units) are rejected
HORIZON_MARGIN = 1e-12


class GroundHomography:
    """
    Plane-induced homography between a camera's pixels and the body z=0 ground plane.

    matrix maps homogeneous pixels to homogeneous ground (x, y, 1) in the body frame. Only pixels on
    the ground side of the plane's vanishing line are valid.
    """

    def __init__(self, cam: CameraModel, matrix: np.ndarray, horizon: np.ndarray):
        self.cam = cam
        self.matrix = matrix
        self.horizon = horizon
        self._inverse = np.linalg.inv(matrix)

    def __repr__(self) -> str:
        return f"GroundHomography({self.cam.name or 'unnamed'})"

    @staticmethod
    def _homogeneous(pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        return np.column_stack([pixels, np.ones(len(pixels))])

    def is_valid(self, pixels: np.ndarray) -> np.ndarray:
        """ Boolean mask of pixels strictly below the vanishing line of the ground plane. """
        return self._homogeneous(pixels) @ self.horizon > HORIZON_MARGIN

    def ground_xy(self, pixels: np.ndarray) -> np.ndarray:
        """ (N, 2) ground-plane coordinates of valid pixels. """
        mapped = self._homogeneous(pixels) @ self.matrix.T
        return mapped[:, :2] / mapped[:, 2:3]

    def ground_points(self, pixels: np.ndarray) -> np.ndarray:
        """ (N, 3) body-frame points on z=0. """
        xy = self.ground_xy(pixels)
        return np.column_stack([xy, np.zeros(len(xy))])

    def project(self, xy: np.ndarray) -> np.ndarray:
        """ Pixels of ground-plane points, the inverse mapping. """
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        mapped = np.column_stack([xy, np.ones(len(xy))]) @ self._inverse.T
        return mapped[:, :2] / mapped[:, 2:3]


def compute_ground_homography(cam: CameraModel) -> GroundHomography:
    """
    Homography of the body z=0 plane for a calibrated camera.

    With R, t the camera pose in the body frame and c1, c2 the first two columns of R^T, a plane point
    (x, y, 0) projects to K [c1 c2 -R^T t] (x, y, 1)^T; the homography is the inverse of that matrix.
    """
    rotation = cam.extrinsic.rotation
    translation = cam.extrinsic.translation
    axis_z = rotation[2, 2]
    if abs(axis_z) < math.sin(MIN_AXIS_ANGLE):
        raise DegeneracyError(f"Optical axis of camera {cam.name!r} is parallel to the ground plane")
    if abs(translation[2]) < MIN_CAMERA_HEIGHT:
        raise DegeneracyError(f"Camera {cam.name!r} lies on the ground plane")

    r_t = rotation.T
    plane_to_camera = np.column_stack([r_t[:, 0], r_t[:, 1], -r_t @ translation])
    projection = cam.intrinsic_matrix @ plane_to_camera
    matrix = np.linalg.inv(projection)
    # body-frame ray direction z is e_z^T R K^-1 p; rays must point toward the plane
    horizon = -translation[2] * (cam.intrinsic_matrix_inverse.T @ r_t[:, 2])
    return GroundHomography(cam, matrix, horizon)


class BackProjection(NamedTuple):
    # (N, 3) world points
    points: np.ndarray
    # pixels outside the validity region
    skipped: int


def backproject_mask(pixels: Union[np.ndarray, GroundMask], homography: GroundHomography, body_pose: Pose) -> BackProjection:
    """
    World points of ground pixels seen from a body pose.

    :param pixels: (N, 2) ground pixel list, or a GroundMask
    """
    if isinstance(pixels, GroundMask):
        pixels = pixels.pixels()
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(pixels) == 0:
        return BackProjection(np.zeros((0, 3)), 0)
    valid = homography.is_valid(pixels)
    skipped = int(np.count_nonzero(~valid))
    if skipped:
        logger.debug(f"Skipped {skipped} ground pixels above the horizon of {homography}")
    points = body_pose.transform_points(homography.ground_points(pixels[valid]))
    return BackProjection(points.reshape(-1, 3), skipped)
