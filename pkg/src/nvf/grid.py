"""Dense voxel grids with values stored at voxel centres."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse


@dataclass(frozen=True)
class GridSpec:
    resolution: tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray  # minimum corner of the grid box

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if len(res) != 3 or min(res) < 1:
            raise ValueError(f"bad grid resolution {self.resolution}")
        if not self.voxel_size > 0:
            raise ValueError("voxel size must be positive")
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        origin.setflags(write=False)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "origin", origin)

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (self.resolution == other.resolution and self.voxel_size == other.voxel_size
                and np.array_equal(self.origin, other.origin))

    def __hash__(self):
        return hash((self.resolution, self.voxel_size, tuple(self.origin)))

    @property
    def bounds(self) -> np.ndarray:
        hi = self.origin + np.array(self.resolution) * self.voxel_size
        return np.stack([self.origin, hi])

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def diameter(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(hi - lo))

    def centers(self) -> np.ndarray:
        """World positions of all voxel centres, shape (X, Y, Z, 3)."""
        axes = [self.origin[a] + (np.arange(self.resolution[a]) + 0.5) * self.voxel_size for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def inside(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds
        return np.all((points >= lo) & (points <= hi), axis=-1)

    def stencil(self, points: np.ndarray):
        """Trilinear interpolation stencil.

        Returns flat corner indices (M, 8), weights (M, 8) and an inside mask
        (M,). Between the outermost voxel centres and the box faces the value
        of the nearest centre is used.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        res = np.array(self.resolution)
        u = (pts - self.origin) / self.voxel_size - 0.5
        u = np.clip(u, 0.0, res - 1.0)
        i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(res - 2, 0))
        f = u - i0
        i1 = np.minimum(i0 + 1, res - 1)
        strides = np.array([res[1] * res[2], res[2], 1])
        idx = np.empty((len(pts), 8), dtype=np.int64)
        w = np.empty((len(pts), 8), dtype=np.float64)
        c = 0
        for dx in (0, 1):
            ix = i1[:, 0] if dx else i0[:, 0]
            wx = f[:, 0] if dx else 1.0 - f[:, 0]
            for dy in (0, 1):
                iy = i1[:, 1] if dy else i0[:, 1]
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dz in (0, 1):
                    iz = i1[:, 2] if dz else i0[:, 2]
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    idx[:, c] = ix * strides[0] + iy * strides[1] + iz * strides[2]
                    w[:, c] = wx * wy * wz
                    c += 1
        return idx, w, self.inside(pts)


def stencil_matrix(idx: np.ndarray, w: np.ndarray, n_voxels: int) -> sparse.csr_matrix:
    """Sparse (M, V) interpolation matrix with one row per point."""
    m, k = idx.shape
    return sparse.csr_matrix((w.ravel(), idx.ravel(), np.arange(0, m * k + 1, k)), shape=(m, n_voxels))


def interpolate(flat_values: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply a stencil to grid values flattened to (V,) or (V, C)."""
    return stencil_matrix(idx, w, len(flat_values)) @ np.asarray(flat_values, dtype=np.float64)


def scatter(grad: np.ndarray, idx: np.ndarray, w: np.ndarray, n_voxels: int) -> np.ndarray:
    """Adjoint of :func:`interpolate` for per-point gradients (M,) or (M, C)."""
    return stencil_matrix(idx, w, n_voxels).T @ grad
