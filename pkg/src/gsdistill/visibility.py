"""Baked shadow field: a regular grid of order-3 SH visibility vectors.

Each grid point splats the scene into an opacity cubemap (transmittance to
a white background) and projects it onto the order-3 basis.  Queries are
trilinear; the grid is frozen after baking so queries only produce
gradients w.r.t. the query position.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import shmath
from .errors import FormatError
from .splat import render_opacity_cubemap

GRID_MAGIC = b"VISG"
OPACITY_ACTIVE = 0.005


@dataclass
class VisibilityGrid:
    bbox_min: np.ndarray  # (3,)
    bbox_max: np.ndarray  # (3,)
    cells: np.ndarray  # (nx, ny, nz, 9)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.cells.shape[:3]

    def query(self, points: np.ndarray):
        """Trilinear interpolation; points outside clamp to the boundary.

        Returns (values (..., 9), tape) where the tape carries corner
        indices, weights and position partials for the adjoint.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dims = np.array(self.dims)
        span = self.bbox_max - self.bbox_min
        t_raw = (pts - self.bbox_min) / span * (dims - 1)
        t = np.clip(t_raw, 0.0, dims - 1)
        free = (t_raw > 0.0) & (t_raw < dims - 1)
        i0 = np.minimum(t.astype(np.int64), dims - 2)
        f = t - i0

        corners = []
        weights = []
        dweights = []  # d(weight)/d(f_axis) per axis
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    wx = f[:, 0] if cx else 1 - f[:, 0]
                    wy = f[:, 1] if cy else 1 - f[:, 1]
                    wz = f[:, 2] if cz else 1 - f[:, 2]
                    sx = 1.0 if cx else -1.0
                    sy = 1.0 if cy else -1.0
                    sz = 1.0 if cz else -1.0
                    corners.append(
                        (i0[:, 0] + cx, i0[:, 1] + cy, i0[:, 2] + cz)
                    )
                    weights.append(wx * wy * wz)
                    dweights.append(
                        np.stack([sx * wy * wz, wx * sy * wz, wx * wy * sz], -1)
                    )
        vals = np.zeros((pts.shape[0], 9))
        for (ix, iy, iz), w in zip(corners, weights):
            vals += w[:, None] * self.cells[ix, iy, iz]
        tape = _QueryTape(self, corners, weights, dweights, free, span, dims, pts.shape[0])
        shape = np.asarray(points).shape[:-1]
        return vals.reshape(shape + (9,)), tape


class _QueryTape:
    def __init__(self, grid, corners, weights, dweights, free, span, dims, n):
        self.grid = grid
        self.corners = corners
        self.weights = weights
        self.dweights = dweights
        self.free = free
        self.scale = (dims - 1) / span  # d(f)/d(x)
        self.n = n

    def backward_position(self, d_vals: np.ndarray) -> np.ndarray:
        """d(loss)/d(query point) given d(loss)/d(values)."""
        d = d_vals.reshape(self.n, 9)
        d_x = np.zeros((self.n, 3))
        for (ix, iy, iz), dw in zip(self.corners, self.dweights):
            coef = (self.grid.cells[ix, iy, iz] * d).sum(-1)  # (n,)
            d_x += coef[:, None] * dw
        return d_x * self.scale[None, :] * self.free


def unoccluded_grid(bbox_min, bbox_max, dims) -> VisibilityGrid:
    cells = np.zeros(tuple(dims) + (9,))
    cells[..., 0] = shmath.UNOCCLUDED_DC
    return VisibilityGrid(
        np.asarray(bbox_min, dtype=np.float64),
        np.asarray(bbox_max, dtype=np.float64),
        cells,
    )


def scene_bbox(scene, margin: float = 0.1):
    pos = scene.gaussians.pos
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    center = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo), 1e-3) * (1.0 + margin)
    return center - half, center + half


def bake_visibility(
    scene,
    dims: tuple[int, int, int] = (32, 32, 32),
    face_res: int = 32,
    bbox=None,
) -> VisibilityGrid:
    """Render-and-project visibility at every grid point.

    With no Gaussian above the opacity threshold the grid short-circuits
    to the exact unoccluded vector (2 sqrt(pi), 0, ..., 0) per cell.
    """
    if scene.count == 0:
        raise ValueError("cannot bake visibility for an empty scene")
    dims = tuple(int(d) for d in dims)
    if min(dims) < 2:
        raise ValueError("grid needs at least 2 cells per axis")
    if bbox is None:
        bbox = scene_bbox(scene)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)

    if not np.any(scene.activated_opacity() >= OPACITY_ACTIVE):
        return unoccluded_grid(lo, hi, dims)

    proj = shmath.projection_matrix(face_res, 3)  # (texels, 9)
    cells = np.empty(dims + (9,))
    axes = [np.linspace(lo[a], hi[a], dims[a]) for a in range(3)]
    for ix, x in enumerate(axes[0]):
        for iy, y in enumerate(axes[1]):
            for iz, z in enumerate(axes[2]):
                cube = render_opacity_cubemap(scene, np.array([x, y, z]), face_res)
                cells[ix, iy, iz] = cube.reshape(-1) @ proj
    return VisibilityGrid(lo, hi, cells)


def save_grid(grid: VisibilityGrid, path) -> None:
    """Binary cache: magic 'VISG', dims 3xu32, bbox 6xf32, then the cells
    in x-fastest order as 9xf32 each."""
    nx, ny, nz = grid.dims
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", nx, ny, nz))
        fh.write(np.concatenate([grid.bbox_min, grid.bbox_max]).astype("<f4").tobytes())
        fh.write(np.moveaxis(grid.cells, (0, 1, 2), (2, 1, 0)).astype("<f4").tobytes())


def load_grid(path) -> VisibilityGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != GRID_MAGIC:
        raise FormatError("not a visibility grid file (bad magic)", offset=0)
    nx, ny, nz = struct.unpack_from("<III", data, 4)
    bbox = np.frombuffer(data, dtype="<f4", count=6, offset=16).astype(np.float64)
    need = 40 + nx * ny * nz * 9 * 4
    if len(data) < need:
        raise FormatError("truncated visibility grid", offset=len(data))
    cells = (
        np.frombuffer(data, dtype="<f4", count=nx * ny * nz * 9, offset=40)
        .reshape(nz, ny, nx, 9)
        .astype(np.float64)
    )
    return VisibilityGrid(bbox[:3], bbox[3:], np.moveaxis(cells, (0, 1, 2), (2, 1, 0)).copy())
