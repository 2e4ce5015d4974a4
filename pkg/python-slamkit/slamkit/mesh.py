from __future__ import annotations

import math
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .data import DatasetFormatError, UndefinedMetricError
from .geometry import check_unit_vector

PathLike = Union[str, Path]


class Mesh:
    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        assert np.all((self.triangles >= 0) & (self.triangles < len(self.vertices))), "Triangle index out of range"

    @classmethod
    def empty(cls) -> Mesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __repr__(self) -> str:
        return f"Mesh({len(self.vertices)} vertices, {len(self.triangles)} triangles)"

    def __len__(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        corners = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=1)

    def write_obj(self, path: PathLike):
        """ Wavefront OBJ: vertices and 1-based triangular faces, no materials. """
        with open(path, "w", newline="\n") as f:
            f.write(f"# {len(self.vertices)} vertices, {len(self.triangles)} triangles\n")
            for x, y, z in self.vertices:
                f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
            for a, b, c in self.triangles + 1:
                f.write(f"f {a} {b} {c}\n")

    @classmethod
    def read_obj(cls, path: PathLike) -> Mesh:
        vertices, triangles = [], []
        with open(path) as f:
            for number, line in enumerate(f, 1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                try:
                    if parts[0] == "v":
                        vertices.append([float(x) for x in parts[1:4]])
                    elif parts[0] == "f":
                        triangles.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
                except ValueError as e:
                    raise DatasetFormatError(f"{path}:{number}: {e}")
        return cls(np.array(vertices).reshape(-1, 3), np.array(triangles, dtype=np.int64).reshape(-1, 3))


class Plane(NamedTuple):
    """ Points x with normal . x = offset """

    normal: np.ndarray
    offset: float = 0.0

    def distances(self, points: np.ndarray) -> np.ndarray:
        normal = check_unit_vector(self.normal, tolerance=1e-9)
        return np.abs(np.asarray(points, dtype=float).reshape(-1, 3) @ normal - self.offset)


GROUND_PLANE = Plane(np.array([0.0, 0.0, 1.0]), 0.0)


def reconstruction_error(mesh: Mesh, surface=None, points: Optional[np.ndarray] = None) -> float:
    """
    RMSE [m] of mesh-vertex distances to the ground-truth surface.

    :param surface: analytic surface with a distances(points) method, e.g. a Plane
    :param points: dense ground-truth sampling, scored by nearest neighbour
    """
    assert (surface is None) != (points is None), "Give exactly one of surface and points"
    if mesh.is_empty or len(mesh.vertices) == 0:
        raise UndefinedMetricError("Reconstruction error of an empty mesh")
    if surface is not None:
        distances = surface.distances(mesh.vertices)
    else:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise UndefinedMetricError("Reconstruction error against an empty ground-truth cloud")
        distances, _ = cKDTree(points).query(mesh.vertices)
    return math.sqrt(float(np.mean(np.square(distances))))
