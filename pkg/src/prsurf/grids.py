"""Dense voxel-grid scalar fields.

Conventions used everywhere in this package:

- A grid of resolution (rx, ry, rz) stores values at *vertices*; vertex
  (i, j, k) sits at world position  origin + spacing * (i, j, k).
- The grid's world bounding box runs from origin to
  origin + spacing * (res - 1) per axis.
- Cell lookup: floor((p - origin) / spacing), clamped to [0, res - 2] per
  axis, so points on a cell face belong to the lower cell.
- Queries outside the box clamp to the box and add the Euclidean distance
  from the query to its clamped image; this keeps an SDF-like positive
  far field instead of a constant extension.

Values are stored float32; smoothing accumulates in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class VoxelGrid:
    """Scalar field on a regular lattice with world-space placement."""

    resolution: tuple[int, int, int]
    origin: np.ndarray        # (3,) float64
    spacing: float
    values: np.ndarray        # (rx, ry, rz) float32, indexed [x, y, z]

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if any(r < 2 for r in res):
            raise ValueError(f"resolution components must be >= 2, got {res}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        object.__setattr__(self, "resolution", res)
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.shape != res:
            if vals.size == res[0] * res[1] * res[2]:
                # flat arrays are accepted in x-fastest order (SDFG layout)
                vals = vals.reshape(res, order="F").copy()
            else:
                raise ValueError(f"values shape {vals.shape} does not match resolution {res}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def max_corner(self) -> np.ndarray:
        return self.origin + self.spacing * (np.asarray(self.resolution, dtype=np.float64) - 1.0)

    @property
    def extent(self) -> np.ndarray:
        return self.max_corner - self.origin


def _clamp_to_box(grid: VoxelGrid, pts: np.ndarray):
    """Clamp points to the grid box; return (clamped, distance to box)."""
    lo = grid.origin
    hi = grid.max_corner
    clamped = np.clip(pts, lo, hi)
    dist = np.linalg.norm(pts - clamped, axis=-1)
    return clamped, dist


def _cell_and_frac(grid: VoxelGrid, pts: np.ndarray):
    """Lower cell index and in-cell fraction for points inside the box."""
    res = np.asarray(grid.resolution)
    u = (pts - grid.origin) / grid.spacing
    cell = np.floor(u).astype(np.int64)
    cell = np.clip(cell, 0, res - 2)
    frac = u - cell
    return cell, frac


def _corner_values(grid: VoxelGrid, cell: np.ndarray) -> np.ndarray:
    """Gather the 8 corner values of each cell, shape (..., 2, 2, 2)."""
    x0, y0, z0 = cell[..., 0], cell[..., 1], cell[..., 2]
    v = grid.values
    out = np.empty(cell.shape[:-1] + (2, 2, 2), dtype=np.float64)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                out[..., dx, dy, dz] = v[x0 + dx, y0 + dy, z0 + dz]
    return out


def interpolate(grid: VoxelGrid, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at world points, clamp+distance outside.

    pts: (..., 3). Returns float64 values of the same leading shape.
    """
    pts = np.asarray(pts, dtype=np.float64)
    scalar = pts.ndim == 1
    p = pts.reshape(-1, 3)
    clamped, dist = _clamp_to_box(grid, p)
    cell, frac = _cell_and_frac(grid, clamped)
    c = _corner_values(grid, cell)
    wx, wy, wz = frac[:, 0], frac[:, 1], frac[:, 2]
    c00 = c[:, 0, 0, 0] * (1 - wx) + c[:, 1, 0, 0] * wx
    c10 = c[:, 0, 1, 0] * (1 - wx) + c[:, 1, 1, 0] * wx
    c01 = c[:, 0, 0, 1] * (1 - wx) + c[:, 1, 0, 1] * wx
    c11 = c[:, 0, 1, 1] * (1 - wx) + c[:, 1, 1, 1] * wx
    c0 = c00 * (1 - wy) + c10 * wy
    c1 = c01 * (1 - wy) + c11 * wy
    out = c0 * (1 - wz) + c1 * wz + dist
    out = out.reshape(pts.shape[:-1])
    return float(out) if scalar else out


def interpolate_with_oob(grid: VoxelGrid, pts: np.ndarray):
    """Like interpolate, but also returns the out-of-box distance."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    _, dist = _clamp_to_box(grid, pts)
    return interpolate(grid, pts), dist


def grid_gradient(grid: VoxelGrid, pts: np.ndarray) -> np.ndarray:
    """Analytic spatial gradient of the trilinear interpolant.

    Piecewise-trilinear derivative inside the box. Outside, the gradient of
    the clamp+distance extension: clamped axes contribute the unit direction
    from the box to the point, free axes the in-box interpolant gradient.
    """
    pts = np.asarray(pts, dtype=np.float64)
    p = pts.reshape(-1, 3)
    clamped, dist = _clamp_to_box(grid, p)
    cell, frac = _cell_and_frac(grid, clamped)
    c = _corner_values(grid, cell)
    wx, wy, wz = frac[:, 0], frac[:, 1], frac[:, 2]

    # d/dx: difference along x, interpolate over (y, z)
    dx = c[:, 1] - c[:, 0]                             # (N, 2, 2) over (y, z)
    gx = ((dx[:, 0, 0] * (1 - wy) + dx[:, 1, 0] * wy) * (1 - wz)
          + (dx[:, 0, 1] * (1 - wy) + dx[:, 1, 1] * wy) * wz)
    dy = c[:, :, 1] - c[:, :, 0]                       # (N, 2, 2) over (x, z)
    gy = ((dy[:, 0, 0] * (1 - wx) + dy[:, 1, 0] * wx) * (1 - wz)
          + (dy[:, 0, 1] * (1 - wx) + dy[:, 1, 1] * wx) * wz)
    dz = c[:, :, :, 1] - c[:, :, :, 0]                 # (N, 2, 2) over (x, y)
    gz = ((dz[:, 0, 0] * (1 - wx) + dz[:, 1, 0] * wx) * (1 - wy)
          + (dz[:, 0, 1] * (1 - wx) + dz[:, 1, 1] * wx) * wy)
    grad = np.stack([gx, gy, gz], axis=-1) / grid.spacing

    outside = dist > 0
    if np.any(outside):
        delta = p[outside] - clamped[outside]
        ddist = delta / dist[outside, None]
        pinned = delta != 0.0
        g = grad[outside]
        g[pinned] = 0.0
        grad[outside] = g + ddist
    return grad.reshape(pts.shape)


def gaussian_smooth(grid: VoxelGrid, sigma_voxels: float) -> VoxelGrid:
    """Separable Gaussian smoothing with edge replication.

    Kernel radius is ceil(3 * sigma); sigma 0 returns the grid unchanged.
    """
    if sigma_voxels < 0:
        raise ValueError(f"sigma_voxels must be >= 0, got {sigma_voxels}")
    if sigma_voxels == 0:
        return grid
    radius = int(np.ceil(3.0 * sigma_voxels))
    smoothed = ndimage.gaussian_filter(
        grid.values.astype(np.float64), sigma=sigma_voxels, mode="nearest", radius=radius
    )
    return VoxelGrid(grid.resolution, grid.origin, grid.spacing, smoothed.astype(np.float32))


@dataclass(frozen=True)
class LocalFieldTransform:
    """World -> normalized-local map: p_local = scale * (R @ p + t)."""

    rotation: np.ndarray      # (3, 3), orthonormal, det +1
    translation: np.ndarray   # (3,)
    scale: float = 1.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-8):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation must have determinant +1")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        rot.setflags(write=False)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        tr.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "scale", float(self.scale))

    @staticmethod
    def identity() -> "LocalFieldTransform":
        return LocalFieldTransform(np.eye(3), np.zeros(3), 1.0)


def to_local(pts: np.ndarray, t: LocalFieldTransform) -> np.ndarray:
    """Apply the rigid transform, then the similarity scale."""
    pts = np.asarray(pts, dtype=np.float64)
    return t.scale * (pts @ t.rotation.T + t.translation)


# ---------------------------------------------------------------------------
# SDFG binary grid format: magic 'SDFG', u32 version, 3 x u32 resolution,
# 3 x f64 origin, f64 spacing, then f32 little-endian values, x fastest.

_SDFG_MAGIC = b"SDFG"
_SDFG_VERSION = 1


def save_sdfg(path, grid: VoxelGrid) -> None:
    with open(path, "wb") as f:
        f.write(_SDFG_MAGIC)
        f.write(np.uint32(_SDFG_VERSION).tobytes())
        f.write(np.asarray(grid.resolution, dtype="<u4").tobytes())
        f.write(np.asarray(grid.origin, dtype="<f8").tobytes())
        f.write(np.float64(grid.spacing).tobytes())
        f.write(grid.values.astype("<f4").ravel(order="F").tobytes())


def load_sdfg(path) -> VoxelGrid:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _SDFG_MAGIC:
            raise ValueError(f"not an SDFG file (magic {magic!r})")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != _SDFG_VERSION:
            raise ValueError(f"unsupported SDFG version {version}")
        res = tuple(int(v) for v in np.frombuffer(f.read(12), dtype="<u4"))
        origin = np.frombuffer(f.read(24), dtype="<f8").copy()
        spacing = float(np.frombuffer(f.read(8), dtype="<f8")[0])
        count = res[0] * res[1] * res[2]
        vals = np.frombuffer(f.read(4 * count), dtype="<f4")
        if vals.size != count:
            raise ValueError("truncated SDFG file")
        values = vals.reshape(res, order="F")
    return VoxelGrid(res, origin, spacing, values)
