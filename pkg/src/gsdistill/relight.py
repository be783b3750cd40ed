"""Environment swapping with channel-wise scale alignment, and material
edits on a trained scene.

Relighting keeps the learned raw radiance as-is (it retains the original
lighting, by design); only the physically-based branch responds to the new
environment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cubemap
from .brdf import BrdfLut
from .envlight import LightContext
from .render import RenderConfig, RenderPipeline
from .scene import Scene, logit, sigmoid
from .shading import MODE_FULL


@dataclass
class ScaleAlignment:
    s: np.ndarray  # (3,) positive per-channel factors
    mode: str = "env_to_env"

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if np.any(self.s <= 0):
            raise ValueError("alignment factors must be positive")


def identity_alignment() -> ScaleAlignment:
    return ScaleAlignment(np.ones(3), mode="none")


def _weighted_mean(env: np.ndarray) -> np.ndarray:
    w = cubemap.texel_solid_angles(env.shape[1])
    return (env * w[None, :, :, None]).sum(axis=(0, 1, 2)) / (6.0 * w.sum())


def resample_cubemap(env: np.ndarray, res: int) -> np.ndarray:
    if env.shape[1] == res:
        return env
    dirs = cubemap.all_dirs(res)
    return cubemap.sample_faces(env, dirs)


def compute_env_alignment(pred_env: np.ndarray, gt_env: np.ndarray) -> ScaleAlignment:
    """Per channel: mean(pred) / mean(gt), solid-angle weighted.

    The returned factors scale a *new* ground-truth environment into the
    predicted light's units before relighting.
    """
    if pred_env.shape[1] != gt_env.shape[1]:
        gt_env = resample_cubemap(gt_env, pred_env.shape[1])
    mp = _weighted_mean(pred_env)
    mg = _weighted_mean(gt_env)
    if np.any(mg <= 0):
        raise ValueError("ground-truth environment has a zero-energy channel")
    return ScaleAlignment(mp / mg, mode="env_to_env")


def compute_image_alignment(pred: np.ndarray, gt: np.ndarray) -> ScaleAlignment:
    """Per-image channel-wise least-squares scale (gt ~= s * pred)."""
    s = np.empty(3)
    for c in range(3):
        denom = float((pred[..., c] ** 2).sum())
        s[c] = float((pred[..., c] * gt[..., c]).sum()) / max(denom, 1e-12)
    return ScaleAlignment(np.maximum(s, 1e-12), mode="per_image")


def relight_context(new_env: np.ndarray, align: ScaleAlignment,
                    samples: int = 1024) -> LightContext:
    return LightContext.from_radiance(new_env * align.s, samples=samples)


def relight(
    scene: Scene,
    new_env: np.ndarray,
    align: ScaleAlignment,
    cameras,
    lut: BrdfLut,
    grid=None,
    background=(0.0, 0.0, 0.0),
    samples: int = 1024,
) -> list[np.ndarray]:
    """Re-render under an aligned replacement environment."""
    ctx = relight_context(new_env, align, samples=samples)
    pipe = RenderPipeline(RenderConfig(mode=MODE_FULL, background=background), lut)
    return [pipe.forward(scene, cam, ctx, grid).image for cam in cameras]


def edit_material(scene: Scene, flip_roughness: bool = False, set_albedo=None) -> Scene:
    """Return an edited copy: r <- 1 - r and/or albedo <- constant."""
    out = Scene(
        gaussians=scene.gaussians.copy(),
        light=scene.light,
        visibility=scene.visibility,
        domain_sphere=scene.domain_sphere,
        alpha_active=scene.alpha_active,
        stage_completed=scene.stage_completed,
    )
    if flip_roughness:
        # logit(1 - p) = -logit(p): exact involution on the raw parameter
        out.gaussians.rough = -out.gaussians.rough
    if set_albedo is not None:
        out.gaussians.albedo[:] = logit(np.asarray(set_albedo, dtype=np.float64))
    return out


def activated_roughness(scene: Scene) -> np.ndarray:
    return sigmoid(scene.gaussians.rough)
