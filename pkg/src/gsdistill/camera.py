"""Pinhole camera: intrinsics, rigid world-to-camera transform, ray grids.

Convention: camera looks down +z, x right, y down; pixel (row i, col j)
has center (j + 0.5, i + 0.5) and projects as u = fx * x/z + cx.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cubemap import _FACE_TABLE


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    r_wc: np.ndarray  # (3, 3)
    t_wc: np.ndarray  # (3,)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.r_wc = np.asarray(self.r_wc, dtype=np.float64)
        self.t_wc = np.asarray(self.t_wc, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(self.r_wc @ self.r_wc.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation must be orthonormal")

    @property
    def position(self) -> np.ndarray:
        return -self.r_wc.T @ self.t_wc

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.r_wc.T + self.t_wc

    def ray_dirs(self) -> np.ndarray:
        """(H, W, 3) unit world-space directions through pixel centers."""
        if "rays" not in self._cache:
            j, i = np.meshgrid(np.arange(self.width), np.arange(self.height))
            x = (j + 0.5 - self.cx) / self.fx
            y = (i + 0.5 - self.cy) / self.fy
            d = np.stack([x, y, np.ones_like(x)], axis=-1)
            d /= np.linalg.norm(d, axis=-1, keepdims=True)
            self._cache["rays"] = d @ self.r_wc  # rows transform: R^T d
        return self._cache["rays"]

    @staticmethod
    def look_at(
        eye, target, up=(0.0, 1.0, 0.0), fov_y_deg: float = 45.0, width: int = 64, height: int = 64
    ) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        if abs(np.dot(up, fwd)) > 0.999:
            up = np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        r_wc = np.stack([right, down, fwd])
        fy = 0.5 * height / np.tan(np.radians(fov_y_deg) * 0.5)
        return Camera(
            fx=fy, fy=fy, cx=width / 2.0, cy=height / 2.0,
            width=width, height=height, r_wc=r_wc, t_wc=-r_wc @ eye,
        )


def cube_face_cameras(center: np.ndarray, face_res: int) -> list[Camera]:
    """Six 90-degree cameras matching the cubemap face convention, so the
    rendered face texel (i, j) sees direction face_uv_to_dir(f, u_j, v_i)."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for a, sa, b, sb, c, sc in _FACE_TABLE:
        r = np.zeros((3, 3))
        r[0, b] = sb
        r[1, c] = sc
        r[2, a] = sa
        cams.append(
            Camera(
                fx=face_res / 2.0, fy=face_res / 2.0,
                cx=face_res / 2.0, cy=face_res / 2.0,
                width=face_res, height=face_res,
                r_wc=r, t_wc=-r @ center,
            )
        )
    return cams
