from __future__ import annotations

from typing import Optional, Tuple

import numpy as np


class GroundMask:
    """ Binary ground / not-ground image of one camera; cell (row, col) holds pixel (u=col, v=row). """

    def __init__(self, data: np.ndarray):
        assert data.ndim == 2, f"Ground mask must be 2D, got shape {data.shape}"
        self.data_numpy = np.asarray(data, dtype=bool)

    @classmethod
    def empty(cls, width: int, height: int) -> GroundMask:
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_pixels(cls, pixels: np.ndarray, width: int, height: int) -> GroundMask:
        mask = cls.empty(width, height)
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        cols = np.floor(pixels[:, 0]).astype(int)
        rows = np.floor(pixels[:, 1]).astype(int)
        inside = (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
        mask.data_numpy[rows[inside], cols[inside]] = True
        return mask

    @property
    def width(self) -> int:
        return self.data_numpy.shape[1]

    @property
    def height(self) -> int:
        return self.data_numpy.shape[0]

    def __getitem__(self, pos: Tuple[int, int]) -> bool:
        """ Example usage: mask[(u, v)] """
        assert 0 <= pos[0] < self.width, f"u is {pos[0]}, self.width is {self.width}"
        assert 0 <= pos[1] < self.height, f"v is {pos[1]}, self.height is {self.height}"
        return bool(self.data_numpy[pos[1], pos[0]])

    def __setitem__(self, pos: Tuple[int, int], value: bool):
        assert 0 <= pos[0] < self.width, f"u is {pos[0]}, self.width is {self.width}"
        assert 0 <= pos[1] < self.height, f"v is {pos[1]}, self.height is {self.height}"
        self.data_numpy[pos[1], pos[0]] = bool(value)

    def __len__(self) -> int:
        return int(np.count_nonzero(self.data_numpy))

    def is_set(self, pos: Tuple[int, int]) -> bool:
        return self[pos]

    def copy(self) -> GroundMask:
        return GroundMask(self.data_numpy.copy())

    def pixels(self) -> np.ndarray:
        """ (N, 2) pixel coordinates of the ground cells, row-major order. """
        rows, cols = np.nonzero(self.data_numpy)
        return np.column_stack([cols, rows]).astype(float)

    def plot(self, filename: Optional[str] = None):
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots()
        ax.imshow(self.data_numpy, cmap="gray", interpolation="nearest")
        ax.set_xlabel("u [px]")
        ax.set_ylabel("v [px]")
        if filename:
            fig.savefig(filename)
            plt.close(fig)
        else:
            plt.show()
