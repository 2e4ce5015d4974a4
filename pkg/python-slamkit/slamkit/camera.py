from __future__ import annotations

import math
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .cache import readonly_array_cache
from .data import ConfigError
from .geometry import Pose, hat_many, rotation_about

""" Pinhole camera model.

Camera frame: z along the optical axis, x to the right of the image, y down the image.
Body frame: x forward, y left, z up. The extrinsic is the pose of the camera in the body frame.
"""

MIN_DEPTH = 1e-6

# Camera frame axes expressed in body coordinates for a camera looking along body +x
_FORWARD_LOOKING = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


class CameraModel:
    def __init__(
        self,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        width: int,
        height: int,
        extrinsic: Optional[Pose] = None,
        name: str = "",
    ):
        """
        :param fx: focal length along x [px]
        :param fy: focal length along y [px]
        :param cx: principal point x [px]
        :param cy: principal point y [px]
        :param width: image width [px]
        :param height: image height [px]
        :param extrinsic: pose of the camera in the body frame
        :param name:
        """
        if not (fx > 0 and fy > 0):
            raise ConfigError(f"Focal lengths must be positive, got fx={fx} fy={fy}")
        if not (0 < cx < width and 0 < cy < height):
            raise ConfigError(f"Principal point ({cx}, {cy}) outside image {width}x{height}")
        self.fx = float(fx)
        self.fy = float(fy)
        self.cx = float(cx)
        self.cy = float(cy)
        self.width = int(width)
        self.height = int(height)
        self.extrinsic = extrinsic if extrinsic is not None else Pose.identity()
        self.name = name

    def __repr__(self) -> str:
        return f"CameraModel({self.name or 'unnamed'}, f=({self.fx}, {self.fy}), c=({self.cx}, {self.cy}))"

    @readonly_array_cache
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @readonly_array_cache
    def intrinsic_matrix_inverse(self) -> np.ndarray:
        return np.linalg.inv(self.intrinsic_matrix)

    def with_extrinsic(self, extrinsic: Pose) -> CameraModel:
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, extrinsic, self.name)

    def in_image(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.atleast_2d(pixels)
        return (pixels[:, 0] >= 0) & (pixels[:, 0] < self.width) & (pixels[:, 1] >= 0) & (pixels[:, 1] < self.height)

    def project_camera_points(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        :param points: (N, 3) points in the camera frame
        :return: (N, 2) pixels and a boolean mask of points in front of the camera
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        z = points[:, 2]
        in_front = z > MIN_DEPTH
        safe_z = np.where(in_front, z, 1.0)
        pixels = np.column_stack(
            [self.fx * points[:, 0] / safe_z + self.cx, self.fy * points[:, 1] / safe_z + self.cy]
        )
        return pixels, in_front

    def normalized(self, pixels: np.ndarray) -> np.ndarray:
        """ Pixels to homogeneous normalized image coordinates (N, 3) with last entry 1. """
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        return np.column_stack([(pixels[:, 0] - self.cx) / self.fx, (pixels[:, 1] - self.cy) / self.fy, np.ones(len(pixels))])

    def bearings(self, pixels: np.ndarray) -> np.ndarray:
        """ Unit-norm viewing rays in the camera frame. """
        rays = self.normalized(pixels)
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    def camera_pose(self, body_pose: Pose) -> Pose:
        """ Pose of this camera in the world for a given body pose. """
        return body_pose @ self.extrinsic

    def world_to_camera(self, body_pose: Pose, points: np.ndarray) -> np.ndarray:
        return self.camera_pose(body_pose).inverse_transform_points(points)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "extrinsic_translation": [float(x) for x in self.extrinsic.translation],
            "extrinsic_quaternion_xyzw": [float(x) for x in self.extrinsic.as_quaternion()],
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> CameraModel:
        try:
            extrinsic = Pose.from_quaternion(d["extrinsic_quaternion_xyzw"], d["extrinsic_translation"])
            return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], extrinsic, d.get("name", ""))
        except KeyError as e:
            raise ConfigError(f"Camera description is missing {e}")


def project_landmark(cam: CameraModel, body_pose: Pose, point: np.ndarray) -> Optional[np.ndarray]:
    """ Pixel of a world point, or None when it is behind the camera or outside the image. """
    p_cam = cam.world_to_camera(body_pose, np.asarray(point, dtype=float).reshape(1, 3))
    if p_cam[0, 2] <= 0:
        return None
    pixels, _ = cam.project_camera_points(p_cam)
    if not cam.in_image(pixels)[0]:
        return None
    return pixels[0]


def projection_jacobians(
    cam: CameraModel, body_rotations: np.ndarray, body_translations: np.ndarray, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Batched projection of world points through body poses and the camera extrinsic.

    :param body_rotations: (N, 3, 3)
    :param body_translations: (N, 3)
    :param points: (N, 3) world points
    :return: pixels (N, 2), depth (N,), d pixel / d pose-perturbation (N, 2, 6),
        d pixel / d point (N, 2, 3). The pose perturbation is (rotation, translation) as in Pose.retract.
    """
    r_bc = cam.extrinsic.rotation
    t_bc = cam.extrinsic.translation
    q = np.einsum("nji,nj->ni", body_rotations, points - body_translations)
    p_cam = (q - t_bc) @ r_bc
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    safe_z = np.where(np.abs(z) > MIN_DEPTH, z, MIN_DEPTH)
    pixels = np.column_stack([cam.fx * x / safe_z + cam.cx, cam.fy * y / safe_z + cam.cy])

    d_pix_d_cam = np.zeros((len(points), 2, 3))
    d_pix_d_cam[:, 0, 0] = cam.fx / safe_z
    d_pix_d_cam[:, 0, 2] = -cam.fx * x / safe_z ** 2
    d_pix_d_cam[:, 1, 1] = cam.fy / safe_z
    d_pix_d_cam[:, 1, 2] = -cam.fy * y / safe_z ** 2

    # d p_cam / d point = R_bc^T R_wb^T
    d_cam_d_point = np.einsum("ji,njk->nik", r_bc, np.transpose(body_rotations, (0, 2, 1)))
    d_cam_d_rotation = np.einsum("ji,njk->nik", r_bc, hat_many(q))
    d_pix_d_point = d_pix_d_cam @ d_cam_d_point
    d_pix_d_pose = np.concatenate([d_pix_d_cam @ d_cam_d_rotation, -d_pix_d_point], axis=2)
    return pixels, z, d_pix_d_pose, d_pix_d_point


def camera_extrinsic(yaw_deg: float, pitch_down_deg: float, translation: Tuple[float, float, float]) -> Pose:
    """ Body-frame pose of a camera looking along body heading yaw_deg, tilted down by pitch_down_deg. """
    yaw = rotation_about((0.0, 0.0, 1.0), math.radians(yaw_deg))
    pitch = rotation_about((1.0, 0.0, 0.0), -math.radians(pitch_down_deg))
    return Pose(yaw @ _FORWARD_LOOKING @ pitch, translation)


# Order follows the camera-count ablation: 1cam = left, 2cam = +right, 3cam = +front, 4cam = +rear
DEFAULT_RIG_LAYOUT: List[Tuple[str, float, float, Tuple[float, float, float]]] = [
    ("left", 90.0, 15.0, (1.0, 0.9, 1.1)),
    ("right", -90.0, 15.0, (1.0, -0.9, 1.1)),
    ("front", 0.0, 15.0, (2.0, 0.0, 1.2)),
    ("rear", 180.0, 8.0, (-1.0, 0.0, 1.2)),
]


def default_rig(width: int = 640, height: int = 480, focal: float = 320.0) -> List[CameraModel]:
    return [
        CameraModel(focal, focal, width / 2, height / 2, width, height, camera_extrinsic(yaw, pitch, t), name)
        for name, yaw, pitch, t in DEFAULT_RIG_LAYOUT
    ]
