from __future__ import annotations

import logging
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .marching_cubes import CORNER_OFFSETS, march_cells
from .mesh import Mesh

logger = logging.getLogger(__name__)

# voxel indices are packed into one int64 key, 21 bits per axis
KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_MASK = (1 << KEY_BITS) - 1
FREE_FRACTION = 0.9
MIN_RAY_LENGTH = 1e-9


def voxel_keys(indices: np.ndarray) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3) + KEY_OFFSET
    assert np.all((indices >= 0) & (indices <= KEY_MASK)), "Voxel index outside the addressable grid"
    return (indices[:, 0] << (2 * KEY_BITS)) | (indices[:, 1] << KEY_BITS) | indices[:, 2]


def voxel_indices(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64).reshape(-1)
    return (
        np.column_stack([(keys >> (2 * KEY_BITS)) & KEY_MASK, (keys >> KEY_BITS) & KEY_MASK, keys & KEY_MASK])
        - KEY_OFFSET
    )


class TsdfGrid:
    """
    Sparse truncated signed distance field.

    Voxel (i, j, k) spans [i, i+1) * voxel_size along each axis; values live at voxel centers. Every
    observation adds weight 1 and moves the value toward the observed distance by a running mean.
    """

    def __init__(self, voxel_size: float = 0.2, truncation: float = 0.4):
        assert voxel_size > 0, f"voxel size must be positive, got {voxel_size}"
        assert truncation > 0, f"truncation must be positive, got {truncation}"
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self._slots: Dict[int, int] = {}
        self._keys = np.zeros(0, dtype=np.int64)
        self._tsdf = np.zeros(0)
        self._weight = np.zeros(0)

    def __repr__(self) -> str:
        return f"TsdfGrid({len(self)} voxels, voxel {self.voxel_size} m, truncation {self.truncation} m)"

    def __len__(self) -> int:
        return len(self._slots)

    def copy(self) -> TsdfGrid:
        grid = TsdfGrid(self.voxel_size, self.truncation)
        grid._slots = dict(self._slots)
        grid._keys = self._keys.copy()
        grid._tsdf = self._tsdf.copy()
        grid._weight = self._weight.copy()
        return grid

    @property
    def keys(self) -> np.ndarray:
        return self._keys[: len(self)]

    @property
    def tsdf(self) -> np.ndarray:
        return self._tsdf[: len(self)]

    @property
    def weight(self) -> np.ndarray:
        return self._weight[: len(self)]

    @property
    def indices(self) -> np.ndarray:
        return voxel_indices(self.keys)

    def centers(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        indices = self.indices if indices is None else np.asarray(indices).reshape(-1, 3)
        return (indices + 0.5) * self.voxel_size

    def index_of(self, points: np.ndarray) -> np.ndarray:
        """ Voxel indices containing world points. """
        return np.floor(np.asarray(points, dtype=float).reshape(-1, 3) / self.voxel_size).astype(np.int64)

    def voxel(self, index) -> Optional[Tuple[float, float]]:
        """ (tsdf, weight) of a voxel, None when never observed. """
        slot = self._slots.get(int(voxel_keys(index)[0]))
        if slot is None:
            return None
        return float(self._tsdf[slot]), float(self._weight[slot])

    def _reserve(self, count: int):
        needed = len(self) + count
        if needed <= len(self._keys):
            return
        capacity = max(needed, 2 * len(self._keys), 1024)
        for name in ("_keys", "_tsdf", "_weight"):
            old = getattr(self, name)
            grown = np.zeros(capacity, dtype=old.dtype)
            grown[: len(old)] = old
            setattr(self, name, grown)

    def _slots_for(self, keys: np.ndarray) -> np.ndarray:
        fresh = [int(k) for k in keys if int(k) not in self._slots]
        self._reserve(len(fresh))
        for key in fresh:
            slot = len(self._slots)
            self._slots[key] = slot
            self._keys[slot] = key
        return np.array([self._slots[int(k)] for k in keys], dtype=np.int64)

    def update(self, keys: np.ndarray, sums: np.ndarray, counts: np.ndarray):
        """ Adds counts observations with the given value sums to the voxels of unique keys. """
        if len(keys) == 0:
            return
        slots = self._slots_for(keys)
        weight = self._weight[slots]
        self._tsdf[slots] = (self._tsdf[slots] * weight + sums) / (weight + counts)
        self._weight[slots] = weight + counts

    def lookup(self, keys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """ tsdf values of keys and a mask of observed ones. """
        keys = np.asarray(keys, dtype=np.int64)
        stored = self.keys
        if len(stored) == 0:
            return np.zeros(keys.shape), np.zeros(keys.shape, dtype=bool)
        order = np.argsort(stored)
        position = np.clip(np.searchsorted(stored, keys, sorter=order), 0, len(stored) - 1)
        slots = order[position]
        found = stored[slots] == keys
        found &= self.weight[slots] > 0
        return np.where(found, self.tsdf[slots], 0.0), found

    @classmethod
    def from_sdf(
        cls,
        sdf: Callable[[np.ndarray], np.ndarray],
        lower: np.ndarray,
        upper: np.ndarray,
        voxel_size: float = 0.2,
        truncation: float = 0.4,
    ) -> TsdfGrid:
        """ Grid sampling an analytic signed distance at every voxel center in a box, weight 1. """
        grid = cls(voxel_size, truncation)
        first = np.floor(np.asarray(lower, dtype=float) / voxel_size).astype(np.int64)
        last = np.ceil(np.asarray(upper, dtype=float) / voxel_size).astype(np.int64)
        axes = [np.arange(a, b) for a, b in zip(first, last)]
        indices = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        values = np.clip(np.asarray(sdf(grid.centers(indices)), dtype=float), -truncation, truncation)
        grid.update(voxel_keys(indices), values, np.ones(len(indices)))
        return grid


def traverse(grid: TsdfGrid, origin: np.ndarray, directions: np.ndarray, lengths: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Voxels pierced by rays from one origin, by exact voxel stepping.

    :param directions: (N, 3) unit ray directions
    :param lengths: (N,) ray parameter at which each ray stops
    :return: ray id and voxel index of every visited voxel
    """
    n = len(directions)
    s = grid.voxel_size
    voxel = np.tile(grid.index_of(origin)[0], (n, 1))
    step = np.sign(directions).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = (voxel + (step > 0)) * s
        t_max = np.where(step != 0, (boundary - origin) / directions, np.inf)
        t_delta = np.where(step != 0, s / np.abs(directions), np.inf)
    rows = np.arange(n)
    active = np.ones(n, dtype=bool)
    ray_ids, visited = [], []
    while np.any(active):
        ray_ids.append(rows[active])
        visited.append(voxel[active].copy())
        axis = np.argmin(t_max, axis=1)
        t_next = t_max[rows, axis]
        active &= t_next <= lengths
        moving = rows[active]
        voxel[moving, axis[moving]] += step[moving, axis[moving]]
        t_max[moving, axis[moving]] += t_delta[moving, axis[moving]]
    return np.concatenate(ray_ids), np.concatenate(visited)


def integrate(grid: TsdfGrid, origin: np.ndarray, cloud: np.ndarray) -> TsdfGrid:
    """
    Fuses the rays origin -> point of a cloud into the grid, in place.

    Voxels more than the truncation in front of an endpoint are carved toward +truncation, voxels
    within it get the signed distance along the ray, voxels beyond it are left alone.
    """
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    origin = np.asarray(origin, dtype=float).reshape(3)
    if len(cloud) == 0:
        return grid
    offsets = cloud - origin
    lengths = np.linalg.norm(offsets, axis=1)
    usable = lengths > MIN_RAY_LENGTH
    if not np.all(usable):
        logger.debug(f"Skipped {np.count_nonzero(~usable)} points at the sensor origin")
    offsets, lengths = offsets[usable], lengths[usable]
    if len(lengths) == 0:
        return grid
    directions = offsets / lengths[:, None]
    tau = grid.truncation

    ray_ids, voxels = traverse(grid, origin, directions, lengths + tau)
    along = np.einsum("ij,ij->i", grid.centers(voxels) - origin, directions[ray_ids])
    signed = lengths[ray_ids] - along
    keep = signed >= -tau
    observed = np.minimum(signed[keep], tau)

    keys, inverse = np.unique(voxel_keys(voxels[keep]), return_inverse=True)
    sums = np.bincount(inverse.reshape(-1), weights=observed, minlength=len(keys))
    counts = np.bincount(inverse.reshape(-1), minlength=len(keys)).astype(float)
    grid.update(keys, sums, counts)
    return grid


def free_voxels(grid: TsdfGrid, fraction: float = FREE_FRACTION) -> np.ndarray:
    """ Centers of observed voxels whose value is within the free band below +truncation. """
    free = (grid.weight > 0) & (grid.tsdf >= fraction * grid.truncation)
    return grid.centers(grid.indices[free])


def extract_mesh(grid: TsdfGrid) -> Mesh:
    """ Zero level set of the field; only cells whose eight corner voxels are all observed are meshed. """
    if len(grid) == 0:
        return Mesh.empty()
    observed = grid.weight > 0
    base = grid.indices[observed]
    corners = base[:, None, :] + CORNER_OFFSETS[None, :, :]
    values, found = grid.lookup(voxel_keys(corners.reshape(-1, 3)))
    values, found = values.reshape(-1, 8), found.reshape(-1, 8)
    complete = np.all(found, axis=1)
    vertices, triangles = march_cells(
        base[complete], values[complete], np.full(3, 0.5 * grid.voxel_size), grid.voxel_size
    )
    logger.debug(f"Extracted {len(triangles)} triangles from {np.count_nonzero(complete)} complete cells")
    return Mesh(vertices, triangles)
