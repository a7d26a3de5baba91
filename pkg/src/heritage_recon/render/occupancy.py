"""Voxel occupancy grid restricting where rays are sampled."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class OccupancyGrid:
    resolution: int
    lo: np.ndarray  # (3,) min corner
    hi: np.ndarray  # (3,) max corner
    occupied: np.ndarray  # (res, res, res) bool, indexed [ix, iy, iz]
    seed: np.ndarray  # voxels holding the seed points; kept through every update

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.hi - self.lo) / self.resolution

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        idx = np.floor((np.asarray(points) - self.lo) / self.voxel_size).astype(np.int64)
        return np.clip(idx, 0, self.resolution - 1)

    def inside(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def query(self, points: np.ndarray) -> np.ndarray:
        """Occupancy at points; anything outside the box is empty."""
        idx = self.voxel_index(points)
        occ = self.occupied[idx[..., 0], idx[..., 1], idx[..., 2]]
        return occ & self.inside(points)

    def corners(self) -> np.ndarray:
        axis = [np.linspace(self.lo[k], self.hi[k], self.resolution + 1) for k in range(3)]
        g = np.meshgrid(*axis, indexing="ij")
        return np.stack(g, axis=-1)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.lo.copy(), self.hi.copy(),
                             self.occupied.copy(), self.seed.copy())


def build_occupancy_grid(
    points: np.ndarray,
    resolution: int,
    dilation_voxels: int = 0,
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
) -> OccupancyGrid:
    """Mark voxels containing ``points`` and dilate by a cube of ``dilation_voxels``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot build an occupancy grid from an empty point list")
    if resolution < 4:
        raise ValueError("resolution must be >= 4")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    grid = OccupancyGrid(resolution, lo, hi, np.zeros((resolution,) * 3, bool), np.zeros((resolution,) * 3, bool))
    pts = points[grid.inside(points)]
    idx = grid.voxel_index(pts)
    seed = np.zeros((resolution,) * 3, bool)
    seed[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    occ = seed
    if dilation_voxels > 0:
        occ = ndimage.binary_dilation(seed, structure=np.ones((3, 3, 3), bool), iterations=dilation_voxels)
    grid.occupied = occ
    grid.seed = seed
    return grid


def update_occupancy_grid(grid: OccupancyGrid, sdf, threshold: float) -> OccupancyGrid:
    """Re-derive occupancy from the SDF: a voxel is kept when one of its corners
    has ``|d| < threshold``.  Seed voxels always stay occupied."""
    corners = grid.corners()
    d = np.abs(sdf.values(corners.reshape(-1, 3))).reshape(corners.shape[:3])
    if np.isinf(threshold):
        near = np.ones((grid.resolution,) * 3, bool)
    else:
        m = d
        # min over the 8 corners of each voxel
        m = np.minimum(m[:-1], m[1:])
        m = np.minimum(m[:, :-1], m[:, 1:])
        m = np.minimum(m[:, :, :-1], m[:, :, 1:])
        near = m < threshold
    out = grid.copy()
    out.occupied = near | grid.seed
    if not out.occupied.any():
        out.occupied = grid.occupied.copy()
    return out
