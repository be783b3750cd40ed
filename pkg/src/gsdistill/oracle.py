"""Self-consistent synthetic datasets ("oracles") for the acceptance suite.

Each preset hand-authors a ground-truth Gaussian scene with known
materials under a smooth multi-lobe environment, forward-renders it with
the very pipeline under test (progress pinned at 1, raw radiance zero),
and emits a complete training dataset: images, masks, cameras, seed
points, the true environment, a held-out relighting environment with its
reference renders, and the truth scene itself as a sidecar.
"""

from __future__ import annotations

import os

import numpy as np

from . import imgio, visibility
from .brdf import default_brdf_lut
from .camera import Camera
from .cubemap import all_dirs
from .envlight import LightContext
from .render import RenderConfig, RenderPipeline
from .scene import GaussianParams, Scene, init_scene, logit, save_scene
from .shading import MODE_FULL

PRESETS = ("lambertian-sphere", "mirror-sphere", "two-material")

BACKGROUND = (1.0, 1.0, 1.0)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def _quat_z_to(dirs: np.ndarray) -> np.ndarray:
    """Quaternions rotating +z onto each direction (shortest arc)."""
    z = np.array([0.0, 0.0, 1.0])
    d = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    w = 1.0 + d @ z
    xyz = np.cross(np.broadcast_to(z, d.shape), d)
    q = np.concatenate([w[:, None], xyz], axis=-1)
    flip = w < 1e-8  # antiparallel: rotate around x
    q[flip] = np.array([0.0, 1.0, 0.0, 0.0])
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def blob_env_raw(res: int, lobes, base: float = 0.2) -> np.ndarray:
    """Log-radiance of a small sum of broad directional lobes.

    ``lobes`` is a list of (direction, rgb amplitude, sharpness).
    """
    dirs = all_dirs(res)
    raw = np.full((6, res, res, 3), np.log(base))
    for axis, amp, sharp in lobes:
        axis = np.asarray(axis, dtype=np.float64)
        axis /= np.linalg.norm(axis)
        raw += np.asarray(amp) * np.exp(sharp * ((dirs @ axis) - 1.0))[..., None] * np.ones(3)
    return raw


TRAIN_ENV_LOBES = [
    ((0.3, 0.9, 0.3), (2.2, 2.0, 1.6), 9.0),
    ((-0.8, 0.2, -0.6), (1.4, 1.6, 1.9), 14.0),
    ((0.7, -0.3, 0.65), (1.1, 0.9, 0.8), 6.0),
]

RELIGHT_ENV_LOBES = [
    ((-0.4, 0.8, 0.45), (1.8, 1.3, 0.9), 11.0),
    ((0.85, 0.1, -0.5), (0.8, 1.2, 1.7), 7.0),
]


def _sphere_gaussians(n: int, radius: float, center, albedo, rough, metal,
                      opacity=0.97, flatten=0.15) -> GaussianParams:
    dirs = fibonacci_sphere(n)
    pts = np.asarray(center) + radius * dirs
    spacing = radius * np.sqrt(4.0 * np.pi / n)
    s_t = 0.66 * spacing
    scales = np.tile(np.log([s_t, s_t, s_t * flatten]), (n, 1))
    g = GaussianParams(
        pos=pts,
        quat=_quat_z_to(dirs),
        log_scale=scales,
        opacity=np.full(n, logit(opacity)),
        albedo=np.tile(logit(np.asarray(albedo)), (n, 1)),
        rough=np.full(n, logit(rough)),
        metal=np.full(n, logit(metal)),
        sh=np.zeros((n, 16, 3)),
        alpha=np.full(n, 40.0),  # activated exactly 1
    )
    return g


def _plane_gaussians(y: float, half: float, spacing: float, albedo, rough, metal,
                     opacity=0.97) -> GaussianParams:
    ticks = np.arange(-half, half + 1e-9, spacing)
    gx, gz = np.meshgrid(ticks, ticks)
    n = gx.size
    pts = np.stack([gx.ravel(), np.full(n, y), gz.ravel()], axis=-1)
    # local z (shortest axis) points along world +y
    q = np.tile([np.cos(-np.pi / 4), np.sin(-np.pi / 4), 0.0, 0.0], (n, 1))
    s_t = 0.8 * spacing
    g = GaussianParams(
        pos=pts,
        quat=q,
        log_scale=np.tile(np.log([s_t, s_t, s_t * 0.1]), (n, 1)),
        opacity=np.full(n, logit(opacity)),
        albedo=np.tile(logit(np.asarray(albedo)), (n, 1)),
        rough=np.full(n, logit(rough)),
        metal=np.full(n, logit(metal)),
        sh=np.zeros((n, 16, 3)),
        alpha=np.full(n, 40.0),
    )
    return g


def _concat_gaussians(parts) -> GaussianParams:
    return GaussianParams(
        *(np.concatenate([getattr(p, f) for p in parts]) for f in GaussianParams.FIELDS)
    )


def truth_scene(preset: str, n_gaussians: int = 500, light_res: int = 32) -> Scene:
    env = blob_env_raw(light_res, TRAIN_ENV_LOBES)
    if preset == "lambertian-sphere":
        g = _sphere_gaussians(
            n_gaussians, 1.0, (0, 0, 0),
            albedo=(0.75, 0.45, 0.30), rough=0.99, metal=1e-4,
        )
    elif preset == "mirror-sphere":
        g = _sphere_gaussians(
            n_gaussians, 1.0, (0, 0, 0),
            albedo=(0.95, 0.95, 0.95), rough=0.05, metal=1.0 - 1e-9,
        )
    elif preset == "two-material":
        sphere = _sphere_gaussians(
            max(n_gaussians - 289, 200), 0.8, (0, -0.15, 0),
            albedo=(0.9, 0.9, 0.9), rough=0.2, metal=1.0 - 1e-9,
        )
        plane = _plane_gaussians(
            -0.97, 2.0, 0.25, albedo=(0.55, 0.65, 0.4), rough=0.9, metal=1e-4
        )
        g = _concat_gaussians([sphere, plane])
    else:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    base = init_scene(g.pos, light_res=light_res)
    base.gaussians = g
    base.light.raw[:] = env
    base.alpha_active = True
    base.domain_sphere = (np.zeros(3), 1.5)
    return base


def orbit_cameras(n: int, radius: float, width: int, height: int,
                  elev_range=(-35.0, 40.0), phase: float = 0.0) -> list[Camera]:
    cams = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    elevs = np.linspace(elev_range[0], elev_range[1], n)
    for i in range(n):
        az = phase + golden * i
        el = np.radians(elevs[(i * 7) % n])
        eye = radius * np.array(
            [np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)]
        )
        cams.append(Camera.look_at(eye, [0, 0, 0], width=width, height=height))
    return cams


def render_truth(scene: Scene, cams, grid, lut, samples: int = 1024):
    """Reference renders: images, masks, and normalized normal maps."""
    ctx = LightContext.from_radiance(scene.light.activated(), samples=samples)
    pipe = RenderPipeline(RenderConfig(mode=MODE_FULL, background=BACKGROUND), lut)
    images, masks, normals = [], [], []
    for cam in cams:
        res = pipe.forward(scene, cam, ctx, grid)
        images.append(res.image)
        masks.append(res.gbuf.coverage > 0.5)
        n = res.gbuf.normal.copy()
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        normals.append(n / np.maximum(norm, 1e-9))
    return images, masks, normals


TRAIN_CONFIG = """# desk-scale training configuration emitted by make-oracle
[train]
light_res = 32
vis_dims = 16
vis_face_res = 16
background = 1.0 1.0 1.0

[pretrain]
iterations = 3000

[specular]
iterations = 2000

[diffuse]
iterations = 2000

[refine]
iterations = 1000
"""


def make_oracle(preset: str, out_dir: str, n_views: int = 16, n_eval: int = 4,
                res: int = 64, n_gaussians: int = 500, light_res: int = 32,
                vis_dims: int = 16, vis_face_res: int = 16, seed: int = 0) -> str:
    """Generate the dataset; returns the manifest path."""
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "masks", "env", "relit_gt"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    scene = truth_scene(preset, n_gaussians=n_gaussians, light_res=light_res)
    lut = default_brdf_lut()
    grid = visibility.bake_visibility(
        scene, dims=(vis_dims,) * 3, face_res=vis_face_res
    )
    visibility.save_grid(grid, os.path.join(out_dir, "truth.visg"))

    elev = (-35.0, 40.0) if "sphere" in preset else (8.0, 45.0)
    train_cams = orbit_cameras(n_views, 3.2, res, res, elev)
    eval_cams = orbit_cameras(n_eval, 3.2, res, res, (elev[0] + 12, elev[1] - 8), phase=1.234)

    images, masks, _ = render_truth(scene, train_cams, grid, lut)
    eval_images, eval_masks, _ = render_truth(scene, eval_cams, grid, lut)

    # held-out environment and its reference renders for the eval cameras
    relight_raw = blob_env_raw(light_res, RELIGHT_ENV_LOBES, base=0.3)
    relit_scene = truth_scene(preset, n_gaussians=n_gaussians, light_res=light_res)
    relit_scene.light.raw[:] = relight_raw
    relit_images, _, _ = render_truth(relit_scene, eval_cams, grid, lut)

    imgio.write_cubemap(os.path.join(out_dir, "env"), "env_gt", scene.light.activated())
    imgio.write_cubemap(
        os.path.join(out_dir, "env"), "relight", np.exp(relight_raw)
    )
    save_scene(os.path.join(out_dir, "truth.prds"), scene)

    noise = rng.normal(0.0, 0.02, scene.gaussians.pos.shape)
    pts = scene.gaussians.pos + noise
    with open(os.path.join(out_dir, "points.txt"), "w") as fh:
        for p in pts:
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")

    with open(os.path.join(out_dir, "train.ini"), "w") as fh:
        fh.write(TRAIN_CONFIG)

    lines = [
        "# oracle dataset: " + preset,
        "colorspace display",
        f"background {BACKGROUND[0]} {BACKGROUND[1]} {BACKGROUND[2]}",
        f"resolution {res} {res}",
        "env_gt env/env_gt.cube",
        "relight_env env/relight.cube",
        "truth_scene truth.prds",
        "init_points points.txt",
        "domain_sphere 0 0 0 1.5",
    ]

    def cam_fields(cam: Camera) -> str:
        from .scene import normalize_quats

        r = cam.r_wc
        # rotation matrix to quaternion (w, x, y, z)
        t = np.trace(r)
        if t > 0:
            s = np.sqrt(t + 1.0) * 2
            q = np.array(
                [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
                 (r[1, 0] - r[0, 1]) / s]
            )
        else:
            i = np.argmax(np.diag(r))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k]) * 2
            q = np.empty(4)
            q[0] = (r[k, j] - r[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (r[j, i] + r[i, j]) / s
            q[1 + k] = (r[k, i] + r[i, k]) / s
        q = normalize_quats(q[None])[0]
        return (
            f"{cam.fx:.8f} {cam.fy:.8f} {cam.cx:.4f} {cam.cy:.4f} "
            f"{q[0]:.10f} {q[1]:.10f} {q[2]:.10f} {q[3]:.10f} "
            f"{cam.t_wc[0]:.8f} {cam.t_wc[1]:.8f} {cam.t_wc[2]:.8f}"
        )

    for i, (cam, img, mask) in enumerate(zip(train_cams, images, masks)):
        img_name = f"images/train_{i:03d}.png"
        mask_name = f"masks/train_{i:03d}.png"
        imgio.write_png(os.path.join(out_dir, img_name), img)
        imgio.write_png(os.path.join(out_dir, mask_name), mask.astype(np.float64))
        lines.append(f"view {img_name} {mask_name} {cam_fields(cam)}")
    for i, (cam, img, mask) in enumerate(zip(eval_cams, eval_images, eval_masks)):
        img_name = f"images/eval_{i:03d}.png"
        mask_name = f"masks/eval_{i:03d}.png"
        imgio.write_png(os.path.join(out_dir, img_name), img)
        imgio.write_png(os.path.join(out_dir, mask_name), mask.astype(np.float64))
        lines.append(f"eval_view {img_name} {mask_name} {cam_fields(cam)}")
        imgio.write_png(
            os.path.join(out_dir, f"relit_gt/eval_{i:03d}.png"), relit_images[i]
        )

    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest
