"""Cube-map geometry: face convention, direction/texel mapping, solid angles.

Face order and orientation (fixed convention, documented here once):

    face 0: +X   dir = norm(( 1, -v, -u))
    face 1: -X   dir = norm((-1, -v,  u))
    face 2: +Y   dir = norm(( u,  1,  v))
    face 3: -Y   dir = norm(( u, -1, -v))
    face 4: +Z   dir = norm(( u, -v,  1))
    face 5: -Z   dir = norm((-u, -v, -1))

with u, v in [-1, 1] spanning the face, u along texel columns and v along
texel rows (row 0 is v = -1).  Texel (row i, col j) has
u = 2(j+0.5)/R - 1, v = 2(i+0.5)/R - 1.  ``dir_to_face_uv`` inverts
``face_uv_to_dir`` exactly (up to the face seams).
"""

from __future__ import annotations

import numpy as np

# Per face: (major axis, major sign, u axis, u sign, v axis, v sign).
# dir = s_a*e_a + u*s_b*e_b + v*s_c*e_c, normalized.
_FACE_TABLE = (
    (0, 1.0, 2, -1.0, 1, -1.0),
    (0, -1.0, 2, 1.0, 1, -1.0),
    (1, 1.0, 0, 1.0, 2, 1.0),
    (1, -1.0, 0, 1.0, 2, -1.0),
    (2, 1.0, 0, 1.0, 1, -1.0),
    (2, -1.0, 0, -1.0, 1, -1.0),
)

N_FACES = 6


def face_uv_to_dir(face: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unit directions for points (u, v) in [-1,1]^2 on the given faces."""
    face = np.asarray(face)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(u.shape + (3,))
    for f, (a, sa, b, sb, c, sc) in enumerate(_FACE_TABLE):
        m = face == f
        if not np.any(m):
            continue
        out[m, a] = sa
        out[m, b] = sb * u[m]
        out[m, c] = sc * v[m]
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    return out


def dir_to_face_uv(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map unit directions to (face, u, v); inverse of ``face_uv_to_dir``."""
    d = np.asarray(dirs, dtype=np.float64)
    ax = np.abs(d)
    major = np.argmax(ax, axis=-1)
    sign_pos = np.take_along_axis(d, major[..., None], axis=-1)[..., 0] >= 0
    face = np.where(sign_pos, major * 2, major * 2 + 1)
    u = np.zeros(face.shape)
    v = np.zeros(face.shape)
    for f, (a, sa, b, sb, c, sc) in enumerate(_FACE_TABLE):
        m = face == f
        if not np.any(m):
            continue
        inv = 1.0 / (sa * d[m, a])
        u[m] = sb * d[m, b] * inv
        v[m] = sc * d[m, c] * inv
    return face, u, v


def face_dir_grid(face: int, res: int) -> np.ndarray:
    """(res, res, 3) unit directions at the texel centers of one face."""
    t = (np.arange(res) + 0.5) * 2.0 / res - 1.0
    v, u = np.meshgrid(t, t, indexing="ij")
    f = np.full((res, res), face)
    return face_uv_to_dir(f, u, v)


def all_dirs(res: int) -> np.ndarray:
    """(6, res, res, 3) texel-center directions for all faces."""
    return np.stack([face_dir_grid(f, res) for f in range(N_FACES)])


def _area_element(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.arctan2(u * v, np.sqrt(u * u + v * v + 1.0))


def texel_solid_angles(res: int) -> np.ndarray:
    """(res, res) exact solid angle of each texel (same for all faces).

    Uses the analytic cube-face area integral so the weights of a full
    cubemap sum to 4*pi to machine precision.
    """
    edges = np.arange(res + 1) * 2.0 / res - 1.0
    v1, u1 = np.meshgrid(edges[1:], edges[1:], indexing="ij")
    v0, u0 = np.meshgrid(edges[:-1], edges[:-1], indexing="ij")
    return (
        _area_element(u1, v1)
        - _area_element(u0, v1)
        - _area_element(u1, v0)
        + _area_element(u0, v0)
    )


class BilinearTaps:
    """Clamped-to-face bilinear footprint of a batch of directions.

    Exposes flattened texel indices and weights so callers can gather
    (forward) or scatter (adjoint) against a (6, R, R, C) map.
    """

    def __init__(self, dirs: np.ndarray, res: int):
        self.res = res
        d = np.asarray(dirs, dtype=np.float64)
        self.shape = d.shape[:-1]
        face, u, v = dir_to_face_uv(d.reshape(-1, 3))
        # Texel-center coordinates; clamp keeps the footprint on-face.
        s = (u + 1.0) * 0.5 * res - 0.5
        t = (v + 1.0) * 0.5 * res - 0.5
        s = np.clip(s, 0.0, res - 1.0)
        t = np.clip(t, 0.0, res - 1.0)
        s0 = np.floor(s).astype(np.int64)
        t0 = np.floor(t).astype(np.int64)
        s0 = np.minimum(s0, res - 2) if res > 1 else s0
        t0 = np.minimum(t0, res - 2) if res > 1 else t0
        fs = s - s0
        ft = t - t0
        base = face * res * res
        i00 = base + t0 * res + s0
        if res > 1:
            i01 = i00 + 1
            i10 = i00 + res
            i11 = i10 + 1
        else:
            i01 = i10 = i11 = i00
        self.idx = np.stack([i00, i01, i10, i11], axis=-1)
        self.w = np.stack(
            [(1 - fs) * (1 - ft), fs * (1 - ft), (1 - fs) * ft, fs * ft], axis=-1
        )
        self.face, self.fs, self.ft = face, fs, ft
        # True where the coordinate was not pinned to the face border
        # (pinned coordinates have zero derivative w.r.t. the direction).
        self.s_free = (s > 0.0) & (s < res - 1.0)
        self.t_free = (t > 0.0) & (t < res - 1.0)
        self._d = d.reshape(-1, 3)
        self._u, self._v = u, v

    def gather(self, faces: np.ndarray) -> np.ndarray:
        flat = faces.reshape(-1, faces.shape[-1])
        out = np.einsum("nk,nkc->nc", self.w, flat[self.idx])
        return out.reshape(self.shape + (faces.shape[-1],))

    def scatter(self, adj: np.ndarray, out_shape: tuple) -> np.ndarray:
        """Adjoint of ``gather``: accumulate into a zeroed map."""
        nch = out_shape[-1]
        flat = np.zeros((out_shape[0] * out_shape[1] * out_shape[2], nch))
        a = adj.reshape(-1, nch)
        contrib = self.w[..., None] * a[:, None, :]
        np.add.at(flat, self.idx.reshape(-1), contrib.reshape(-1, nch))
        return flat.reshape(out_shape)

    def gather_grad_dir(self, faces: np.ndarray) -> np.ndarray:
        """d(gather)/d(direction): (N, C, 3) for flattened input dirs."""
        res = self.res
        flat = faces.reshape(-1, faces.shape[-1])
        tex = flat[self.idx]  # (N, 4, C)
        fs, ft = self.fs, self.ft
        # d sample / d fs and d ft from the bilinear weights
        d_fs = (
            -(1 - ft)[:, None] * tex[:, 0]
            + (1 - ft)[:, None] * tex[:, 1]
            - ft[:, None] * tex[:, 2]
            + ft[:, None] * tex[:, 3]
        )
        d_ft = (
            -(1 - fs)[:, None] * tex[:, 0]
            - fs[:, None] * tex[:, 1]
            + (1 - fs)[:, None] * tex[:, 2]
            + fs[:, None] * tex[:, 3]
        )
        # fs = (u+1)/2*res - 0.5 (when not clamped)
        d_u = d_fs * (0.5 * res) * self.s_free[:, None]
        d_v = d_ft * (0.5 * res) * self.t_free[:, None]
        # du/ddir, dv/ddir per face
        n = self._d.shape[0]
        duv_dd = np.zeros((n, 2, 3))
        d = self._d
        for f, (a, sa, b, sb, c, sc) in enumerate(_FACE_TABLE):
            m = self.face == f
            if not np.any(m):
                continue
            inv = 1.0 / (sa * d[m, a])
            duv_dd[m, 0, b] = sb * inv
            duv_dd[m, 0, a] = -sb * d[m, b] * inv * inv * sa
            duv_dd[m, 1, c] = sc * inv
            duv_dd[m, 1, a] = -sc * d[m, c] * inv * inv * sa
        return (
            d_u[:, :, None] * duv_dd[:, None, 0, :]
            + d_v[:, :, None] * duv_dd[:, None, 1, :]
        )


def sample_faces(faces: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear sample of a (6, R, R, C) map at unit directions."""
    res = faces.shape[1]
    return BilinearTaps(dirs, res).gather(faces)
