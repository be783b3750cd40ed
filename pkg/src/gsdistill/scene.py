"""Gaussian scene container: raw (pre-activation) parameters, activations,
normal/depth derivation, initialization and PRDS serialization.

Parameterization: scale is log-space, opacity/albedo/roughness/metallic and
the distillation progress alpha are logit-space with sigmoid activation;
quaternions are stored unnormalized and normalized on use (and after each
optimizer step).  Raw parameters live in float64; the scene file stores
them as little-endian float32 records.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .envlight import LightModel
from .errors import FormatError
from .shmath import SH_C0

SCENE_MAGIC = b"PRDS"
SCENE_VERSION = 1
_FLOATS_PER_GAUSSIAN = 65  # 3+4+3+1+3+1+1+48+1

STAGE_NONE = 0
STAGE_PRETRAIN = 1
STAGE_SPECULAR = 2
STAGE_DIFFUSE = 3
STAGE_REFINE = 4

# Raw logit magnitude cap; sigmoid(40) rounds to 1.0 in float64.
LOGIT_CAP = 40.0


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return np.clip(np.log(p / (1.0 - p)), -LOGIT_CAP, LOGIT_CAP)


def normalize_quats(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """(N, 4) normalized (w, x, y, z) -> (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """d(rotation matrix)/d(normalized quat components): (N, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    jac = np.zeros((n, 4, 3, 3))
    zero = np.zeros(n)
    jac[:, 0] = 2 * np.stack(
        [
            np.stack([zero, -z, y], -1),
            np.stack([z, zero, -x], -1),
            np.stack([-y, x, zero], -1),
        ],
        axis=1,
    )
    jac[:, 1] = 2 * np.stack(
        [
            np.stack([zero, y, z], -1),
            np.stack([y, -2 * x, -w], -1),
            np.stack([z, w, -2 * x], -1),
        ],
        axis=1,
    )
    jac[:, 2] = 2 * np.stack(
        [
            np.stack([-2 * y, x, w], -1),
            np.stack([x, zero, z], -1),
            np.stack([-w, z, -2 * y], -1),
        ],
        axis=1,
    )
    jac[:, 3] = 2 * np.stack(
        [
            np.stack([-2 * z, -w, x], -1),
            np.stack([w, -2 * z, y], -1),
            np.stack([x, y, zero], -1),
        ],
        axis=1,
    )
    return jac


def quat_normalize_backward(q_raw: np.ndarray, d_qhat: np.ndarray) -> np.ndarray:
    """Adjoint of q_hat = q / |q|."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    qh = q_raw / norm
    return (d_qhat - qh * (qh * d_qhat).sum(-1, keepdims=True)) / norm


@dataclass
class GaussianParams:
    """Struct-of-arrays of raw per-Gaussian parameters."""

    pos: np.ndarray  # (N, 3)
    quat: np.ndarray  # (N, 4)
    log_scale: np.ndarray  # (N, 3)
    opacity: np.ndarray  # (N,) logit
    albedo: np.ndarray  # (N, 3) logit
    rough: np.ndarray  # (N,) logit
    metal: np.ndarray  # (N,) logit
    sh: np.ndarray  # (N, 16, 3)
    alpha: np.ndarray  # (N,) logit

    FIELDS = ("pos", "quat", "log_scale", "opacity", "albedo", "rough", "metal", "sh", "alpha")

    @property
    def count(self) -> int:
        return self.pos.shape[0]

    def copy(self) -> "GaussianParams":
        return GaussianParams(*(getattr(self, f).copy() for f in self.FIELDS))

    def select(self, mask) -> "GaussianParams":
        return GaussianParams(*(getattr(self, f)[mask] for f in self.FIELDS))


@dataclass
class Scene:
    gaussians: GaussianParams
    light: LightModel
    visibility: object | None = None  # VisibilityGrid, set after baking
    domain_sphere: tuple[np.ndarray, float] | None = None
    alpha_active: bool = False
    stage_completed: int = STAGE_NONE
    extras: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return self.gaussians.count

    def activated_alpha(self) -> np.ndarray:
        """Per-Gaussian distillation progress; exactly 0 before stage 2."""
        if not self.alpha_active:
            return np.zeros(self.count)
        return sigmoid(self.gaussians.alpha)

    def activated_scale(self) -> np.ndarray:
        return np.exp(self.gaussians.log_scale)

    def activated_opacity(self) -> np.ndarray:
        return sigmoid(self.gaussians.opacity)

    def activated_albedo(self) -> np.ndarray:
        return sigmoid(self.gaussians.albedo)

    def activated_rough(self) -> np.ndarray:
        return sigmoid(self.gaussians.rough)

    def activated_metal(self) -> np.ndarray:
        return sigmoid(self.gaussians.metal)


def shortest_axis_indices(scales: np.ndarray) -> np.ndarray:
    """Index of the minimum scale axis; ties break with z > y > x priority."""
    return 2 - np.argmin(scales[:, ::-1], axis=1)


def gaussian_normals(
    rotmats: np.ndarray, scales: np.ndarray, positions: np.ndarray, cam_pos: np.ndarray
):
    """Camera-facing shortest-axis normals.

    Returns (normals (N,3), axis indices (N,), signs (N,)).
    """
    k = shortest_axis_indices(scales)
    n = np.take_along_axis(rotmats, k[:, None, None], axis=2)[:, :, 0]
    to_cam = cam_pos[None, :] - positions
    sign = np.where((n * to_cam).sum(-1) >= 0.0, 1.0, -1.0)
    return n * sign[:, None], k, sign


def gaussian_normal(scene: Scene, index: int, cam_pos: np.ndarray) -> np.ndarray:
    """Single-Gaussian convenience wrapper over ``gaussian_normals``."""
    g = scene.gaussians
    r = quats_to_rotmats(normalize_quats(g.quat[index : index + 1]))
    s = np.exp(g.log_scale[index : index + 1])
    n, _, _ = gaussian_normals(r, s, g.pos[index : index + 1], np.asarray(cam_pos, dtype=np.float64))
    return n[0]


def gaussian_depth(position: np.ndarray, cam_pos: np.ndarray):
    """Euclidean distance from the Gaussian center to the camera."""
    return float(np.linalg.norm(np.asarray(position, dtype=np.float64) - np.asarray(cam_pos, dtype=np.float64)))


def init_scene(
    points: np.ndarray,
    colors: np.ndarray | None = None,
    light_res: int = 128,
    light_levels: int | None = None,
    opacity: float = 0.1,
    albedo: float = 0.99,
    roughness: float = 0.99,
    metallic: float = 0.5,
) -> Scene:
    """One Gaussian per seed point with the documented defaults.

    Scale is isotropic at each point's mean distance to its three nearest
    neighbours; SH DC carries the seed color (mid-gray when absent) and the
    higher bands start at zero.  The distillation progress is parked at a
    raw value of sigmoid^-1(0.01) but stays inactive (activated value 0)
    until the specular stage bumps it.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] != 3:
        raise ValueError("need at least one seed point of dimension 3")
    n = points.shape[0]
    if n >= 4:
        d, _ = cKDTree(points).query(points, k=4)
        nn = d[:, 1:].mean(axis=1)
    elif n >= 2:
        d, _ = cKDTree(points).query(points, k=min(n, 2))
        nn = d[:, -1]
    else:
        nn = np.array([0.1])
    nn = np.maximum(nn, 1e-4)

    if colors is None:
        colors = np.full((n, 3), 0.5)
    colors = np.asarray(colors, dtype=np.float64)
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = colors / SH_C0

    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0

    g = GaussianParams(
        pos=points.copy(),
        quat=quat,
        log_scale=np.log(nn)[:, None].repeat(3, axis=1),
        opacity=np.full(n, logit(opacity)),
        albedo=np.full((n, 3), logit(albedo)),
        rough=np.full(n, logit(roughness)),
        metal=np.full(n, logit(metallic)),
        sh=sh,
        alpha=np.full(n, logit(0.01)),
    )
    light = LightModel(
        np.full((6, light_res, light_res, 3), np.log(0.5)), levels=light_levels
    )
    return Scene(gaussians=g, light=light, alpha_active=False)


def prune_low_opacity(scene: Scene, threshold: float = 0.005) -> np.ndarray:
    """Drop Gaussians below the opacity threshold; returns the kept mask."""
    keep = scene.activated_opacity() >= threshold
    if keep.sum() == 0:
        # never prune to an empty scene
        return np.ones(scene.count, dtype=bool)
    if not keep.all():
        scene.gaussians = scene.gaussians.select(keep)
    return keep


def _pack_flags(scene: Scene) -> int:
    flags = 0
    if scene.alpha_active:
        flags |= 1
    if scene.visibility is not None:
        flags |= 2
    flags |= (scene.stage_completed & 0xFF) << 8
    return flags


def save_scene(path, scene: Scene) -> None:
    """PRDS container: header (magic, version u32, count u32, flags u32,
    domain sphere 4xf32 with radius < 0 meaning absent, light res u32,
    light level count u32), per-Gaussian f32 records in declared field
    order, then the raw light planes as f32."""
    if scene.count == 0:
        raise ValueError("refusing to save a scene with zero Gaussians")
    g = scene.gaussians
    rec = np.empty((scene.count, _FLOATS_PER_GAUSSIAN), dtype="<f4")
    cursor = 0
    for name in GaussianParams.FIELDS:
        arr = getattr(g, name).reshape(scene.count, -1)
        rec[:, cursor : cursor + arr.shape[1]] = arr
        cursor += arr.shape[1]
    sphere = scene.domain_sphere
    sph = (
        np.array([*sphere[0], sphere[1]], dtype="<f4")
        if sphere is not None
        else np.array([0, 0, 0, -1], dtype="<f4")
    )
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<III", SCENE_VERSION, scene.count, _pack_flags(scene)))
        fh.write(sph.tobytes())
        fh.write(struct.pack("<II", scene.light.res, scene.light.levels))
        fh.write(rec.tobytes())
        fh.write(scene.light.raw.astype("<f4").tobytes())


def load_scene(path, train_samples: int = 64) -> Scene:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SCENE_MAGIC:
        raise FormatError("not a scene file (bad magic)", offset=0)
    version, count, flags = struct.unpack_from("<III", data, 4)
    if version > SCENE_VERSION:
        raise FormatError(
            f"scene file version {version} is newer than supported {SCENE_VERSION}",
            offset=4,
        )
    sph = np.frombuffer(data, dtype="<f4", count=4, offset=16)
    light_res, light_levels = struct.unpack_from("<II", data, 32)
    body = 40
    n_rec = count * _FLOATS_PER_GAUSSIAN
    need = body + 4 * (n_rec + 6 * light_res * light_res * 3)
    if len(data) < need:
        raise FormatError("truncated scene file", offset=len(data))
    rec = (
        np.frombuffer(data, dtype="<f4", count=n_rec, offset=body)
        .reshape(count, _FLOATS_PER_GAUSSIAN)
        .astype(np.float64)
    )
    light_raw = (
        np.frombuffer(data, dtype="<f4", count=6 * light_res * light_res * 3, offset=body + 4 * n_rec)
        .reshape(6, light_res, light_res, 3)
        .astype(np.float64)
    )
    cursor = 0
    fields = {}
    shapes = dict(
        pos=(count, 3), quat=(count, 4), log_scale=(count, 3), opacity=(count,),
        albedo=(count, 3), rough=(count,), metal=(count,), sh=(count, 16, 3),
        alpha=(count,),
    )
    for name in GaussianParams.FIELDS:
        size = int(np.prod(shapes[name][1:])) if len(shapes[name]) > 1 else 1
        fields[name] = rec[:, cursor : cursor + size].reshape(shapes[name]).copy()
        cursor += size
    scene = Scene(
        gaussians=GaussianParams(**fields),
        light=LightModel(light_raw, levels=light_levels, train_samples=train_samples),
        alpha_active=bool(flags & 1),
        stage_completed=(flags >> 8) & 0xFF,
    )
    if sph[3] >= 0:
        scene.domain_sphere = (np.array(sph[:3], dtype=np.float64), float(sph[3]))
    scene.extras["visibility_baked"] = bool(flags & 2)
    return scene
