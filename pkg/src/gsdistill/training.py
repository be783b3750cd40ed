"""Four-stage progressive distillation: per-stage freezing, losses,
optimization loop, and the finite-difference gradient checker.

Stages (each a fresh Adam session over shuffled views):

    pretrain  - raw radiance only, progress frozen at 0; geometry trains
    specular  - progress bumped to 0.01, metallic pinned to 1, Eq.-style
                specular + raw blend; light and reflectance start fitting
    diffuse   - metallic unfrozen, full model, progress and white-light
                regularizers active (requires a baked visibility grid)
    refine    - full model, reduced progress learning rate; real scenes
                freeze the light and switch to the full-image progress loss
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import losses, scene as scene_mod, splat
from .adam import Adam
from .brdf import BrdfLut, default_brdf_lut
from .envlight import light_white_loss, light_white_loss_grad
from .errors import GradientEngineError, PipelineStateError
from .render import ADJOINT_REGISTRY, MODE_OPS, RenderConfig, RenderPipeline
from .scene import Scene, logit, normalize_quats
from .shading import MODE_FULL, MODE_RAW, MODE_SPEC

STAGE_ORDER = ("pretrain", "specular", "diffuse", "refine")
STAGE_IDS = {name: i + 1 for i, name in enumerate(STAGE_ORDER)}

DEFAULT_ITERATIONS = {"pretrain": 3000, "specular": 2000, "diffuse": 2000, "refine": 1000}

DEFAULT_LRS = {
    "pos": 1.6e-4,
    "quat": 5e-3,
    "log_scale": 5e-3,
    "opacity": 5e-2,
    "sh": 2.5e-3,
    "albedo": 5e-3,
    "rough": 5e-3,
    "metal": 5e-3,
    "alpha": 5e-3,
    "light": 1e-2,
}

STAGE_TRAINABLE = {
    "pretrain": {"pos", "quat", "log_scale", "opacity", "sh"},
    "specular": {"quat", "log_scale", "opacity", "sh", "albedo", "rough", "alpha", "light"},
    "diffuse": {"quat", "log_scale", "opacity", "sh", "albedo", "rough", "metal", "alpha", "light"},
    "refine": {"quat", "log_scale", "opacity", "sh", "albedo", "rough", "metal", "alpha", "light"},
}

STAGE_MODE = {
    "pretrain": MODE_RAW,
    "specular": MODE_SPEC,
    "diffuse": MODE_FULL,
    "refine": MODE_FULL,
}


@dataclass
class StageConfig:
    stage: str
    iterations: int
    lrs: dict = field(default_factory=lambda: dict(DEFAULT_LRS))
    lambda_rgb: float = 1.0
    lambda_alpha: float = 0.08
    lambda_light: float = 0.003
    frozen: set = field(default_factory=set)
    real_scene: bool = False
    maskless: bool = False
    seed: int = 0
    raw_mode: str = "pixel"
    prune_interval: int = 500
    prune_threshold: float = 0.005
    psnr_interval: int = 250
    position_lr_decay: float = 0.01  # stage-1 exponential decay target factor
    alpha_lr_scale: float = 0.5  # refine-stage reduction
    radiance_jitter: bool = False
    jitter_interval: int = 1000
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.stage not in STAGE_ORDER:
            raise ValueError(f"unknown stage {self.stage!r}")
        self.frozen = set(self.frozen)


def stage_config(stage: str, **overrides) -> StageConfig:
    cfg = StageConfig(stage=stage, iterations=DEFAULT_ITERATIONS[stage])
    for key, val in overrides.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown stage option {key!r}")
        setattr(cfg, key, val)
    return cfg


@dataclass
class LossReport:
    rows: list = field(default_factory=list)  # (iter, total, rgb, alpha, light, psnr)

    def add(self, iteration, total, rgb, alpha, light, psnr=None):
        self.rows.append((iteration, total, rgb, alpha, light, psnr))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "total", "rgb", "alpha", "light", "psnr"])
            for row in self.rows:
                writer.writerow(["" if v is None else v for v in row])

    def totals(self):
        return np.array([r[1] for r in self.rows])


def _trainable_groups(cfg: StageConfig) -> set:
    return STAGE_TRAINABLE[cfg.stage] - cfg.frozen - (
        {"light"} if cfg.stage == "refine" and cfg.real_scene else set()
    )


def _psnr(pred, gt) -> float:
    mse = float(((pred - gt) ** 2).mean())
    if mse <= 1e-10:
        return 99.0
    return min(10.0 * np.log10(1.0 / mse), 99.0)


def run_stage(scene: Scene, dataset, cfg: StageConfig, lut: BrdfLut | None = None,
              grid=None, report_path=None) -> LossReport:
    """Optimize one stage in place; returns the per-iteration loss report."""
    if not dataset.views:
        raise ValueError("dataset has no training views")
    if cfg.stage in ("diffuse", "refine") and grid is None:
        raise PipelineStateError(
            f"the {cfg.stage} stage needs a baked visibility grid; "
            "run bake-visibility first"
        )
    if lut is None and cfg.stage != "pretrain":
        lut = default_brdf_lut()

    mode = STAGE_MODE[cfg.stage]
    if cfg.stage == "pretrain":
        scene.alpha_active = False
    elif cfg.stage == "specular" and not scene.alpha_active:
        scene.gaussians.alpha[:] = logit(0.01)
        scene.alpha_active = True

    trainable = _trainable_groups(cfg)
    g = scene.gaussians
    rng = np.random.default_rng(cfg.seed)

    def build_optimizer():
        params = {}
        for group in trainable:
            if group == "light":
                params["light"] = scene.light.raw
            else:
                params[group] = getattr(g, group)
        return Adam(params, {k: cfg.lrs[k] for k in params})

    opt = build_optimizer()
    pipe = RenderPipeline(
        RenderConfig(
            mode=mode,
            raw_mode=cfg.raw_mode,
            positions_trainable="pos" in trainable,
            background=cfg.background,
        ),
        lut,
    )
    report = LossReport()
    n_views = len(dataset.views)
    order = rng.permutation(n_views)
    alpha_loss_active = cfg.stage in ("diffuse", "refine")
    light_loss_active = cfg.stage in ("diffuse", "refine") and "light" in trainable

    for it in range(cfg.iterations):
        if it % n_views == 0 and it > 0:
            order = rng.permutation(n_views)
        view = dataset.views[order[it % n_views]]

        ctx = scene.light.build_context() if mode != MODE_RAW else None
        res = pipe.forward(scene, view.camera, ctx, grid)

        rgb_val, rgb_tape = losses.loss_rgb(res.image, view.image)
        d_image = cfg.lambda_rgb * losses.loss_rgb_backward(rgb_tape)

        alpha_val = 0.0
        d_alpha_map = None
        d_alpha_direct = None
        if alpha_loss_active:
            if cfg.stage == "refine" and cfg.real_scene:
                alpha_val, d_map = losses.loss_alpha_full(res.gbuf.alpha)
                d_alpha_map = cfg.lambda_alpha * d_map
            elif cfg.maskless:
                alpha_val, d_alpha_direct = losses.loss_alpha_per_gaussian(
                    scene, scene.domain_sphere or dataset.domain_sphere
                )
            else:
                if view.mask is None:
                    raise PipelineStateError(
                        "masked progress loss needs per-view masks; "
                        "use the maskless configuration instead"
                    )
                alpha_val, d_map = losses.loss_alpha_masked(
                    res.gbuf.alpha, view.mask.astype(np.float64)
                )
                d_alpha_map = cfg.lambda_alpha * d_map

        light_val = 0.0
        if light_loss_active:
            light_val = light_white_loss(ctx.base)
            ctx.add_base_adjoint(cfg.lambda_light * light_white_loss_grad(ctx.base))

        grads = pipe.backward(res, d_image, d_alpha_map=d_alpha_map)
        if d_alpha_direct is not None:
            grads.alpha += cfg.lambda_alpha * d_alpha_direct

        gdict = {k: getattr(grads, k) for k in trainable if k != "light"}
        if "light" in trainable:
            gdict["light"] = ctx.raw_gradient()

        lr_scale = {}
        if cfg.stage == "pretrain" and "pos" in trainable:
            lr_scale["pos"] = cfg.position_lr_decay ** (it / max(cfg.iterations - 1, 1))
        if cfg.stage == "refine" and "alpha" in trainable:
            lr_scale["alpha"] = cfg.alpha_lr_scale
        opt.step(gdict, lr_scale)
        g.quat[:] = normalize_quats(g.quat)

        if (
            cfg.stage == "specular"
            and cfg.radiance_jitter
            and (it + 1) % cfg.jitter_interval == 0
        ):
            # discourage baked-in reflections: perturb the DC band of
            # high-progress Gaussians (off by default)
            high = scene.activated_alpha() > 0.5
            g.sh[high, 0] += rng.normal(0.0, 0.05, (int(high.sum()), 3))

        if (
            cfg.stage == "pretrain"
            and cfg.prune_interval
            and (it + 1) % cfg.prune_interval == 0
            and it + 1 < cfg.iterations
        ):
            keep = scene_mod.prune_low_opacity(scene, cfg.prune_threshold)
            if not keep.all():
                g = scene.gaussians
                opt.select(keep)
                opt.rebind(
                    {
                        k: (scene.light.raw if k == "light" else getattr(g, k))
                        for k in opt.params
                    }
                )

        psnr = None
        if cfg.psnr_interval and (it + 1) % cfg.psnr_interval == 0 and dataset.eval_views:
            ev = dataset.eval_views[0]
            ectx = scene.light.build_context() if mode != MODE_RAW else None
            eres = pipe.forward(scene, ev.camera, ectx, grid)
            psnr = _psnr(eres.image, ev.image)

        total = (
            cfg.lambda_rgb * rgb_val
            + (cfg.lambda_alpha * alpha_val if alpha_loss_active else 0.0)
            + (cfg.lambda_light * light_val if light_loss_active else 0.0)
        )
        report.add(it, total, rgb_val, alpha_val, light_val, psnr)

    scene.stage_completed = STAGE_IDS[cfg.stage]
    if report_path:
        report.write_csv(report_path)
    return report


def gradient_engine_check(mode: str) -> None:
    """Raise unless every op on the mode's render path has an adjoint."""
    for op in MODE_OPS[mode]:
        if op not in ADJOINT_REGISTRY:
            raise GradientEngineError(f"unregistered operation {op!r}")


def elementary_adjoint_checks(tol: float = 1e-6) -> list:
    """FD-check the registered elementwise adjoints (d sigmoid etc.)."""
    rng = np.random.default_rng(3)
    failures = []
    x = rng.normal(0.0, 1.5, 200)
    h = 1e-6
    for name in ("sigmoid", "exp_scale", "exp_light"):
        fwd, grad = ADJOINT_REGISTRY[name]
        fd = (fwd(x + h) - fwd(x - h)) / (2 * h)
        err = np.abs(grad(x) - fd).max()
        if err > tol:
            failures.append((name, err))
    for name, lo, hi in (("aces_tonemap", 0.01, 3.0), ("linear_to_srgb", 0.01, 0.99)):
        fwd, grad = ADJOINT_REGISTRY[name]
        xs = rng.uniform(lo, hi, 200)
        fd = (fwd(xs + h) - fwd(xs - h)) / (2 * h)
        mask = (fwd(xs) > 0) & (fwd(xs) < 1)
        err = np.abs((grad(xs) - fd)[mask]).max()
        if err > 1e-4:
            failures.append((name, err))
    return failures


def gradcheck(seed: int = 0, rel_tol: float = 1e-3, min_probes: int = 30) -> dict:
    """Full-pipeline finite-difference check at random probes.

    Builds a small random scene and verifies analytic gradients of a random
    image functional against central differences for every parameter group
    on the full render path, plus the elementary registry adjoints.
    """
    from gsdistill import visibility
    from gsdistill.camera import Camera
    from gsdistill.cubemap import all_dirs

    rng = np.random.default_rng(seed)
    n = 12
    pts = rng.normal(0, 0.7, (n, 3))
    sc = scene_mod.init_scene(pts, colors=rng.uniform(0.3, 0.8, (n, 3)),
                              light_res=8, light_levels=4)
    g = sc.gaussians
    g.opacity[:] = logit(rng.uniform(0.35, 0.85, n))
    g.log_scale[:] = np.log(0.45) + rng.uniform(-0.35, 0.35, (n, 3))
    g.quat[:] = rng.normal(size=(n, 4))
    g.albedo[:] = logit(rng.uniform(0.25, 0.85, (n, 3)))
    g.rough[:] = logit(rng.uniform(0.25, 0.8, n))
    g.metal[:] = logit(rng.uniform(0.2, 0.8, n))
    g.sh[:, 0] = rng.uniform(0.5, 1.5, (n, 3))
    g.sh[:, 1:] = rng.normal(0, 0.08, (n, 15, 3))
    g.alpha[:] = logit(rng.uniform(0.2, 0.8, n))
    sc.alpha_active = True
    dirs = all_dirs(8)
    raw = np.full((6, 8, 8, 3), np.log(0.4))
    for _ in range(3):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        raw += rng.uniform(0.5, 1.2, 3) * np.exp(
            rng.uniform(1.5, 3.0) * ((dirs @ axis) - 1.0)
        )[..., None]
    sc.light.raw[:] = raw

    grid = visibility.bake_visibility(sc, dims=(4, 4, 4), face_res=16)
    cam = Camera.look_at([0.3, -0.4, -4.0], [0, 0, 0], width=16, height=16)
    weights = rng.normal(size=(16, 16, 3))
    lut = default_brdf_lut()
    cfg = RenderConfig(mode=MODE_FULL, positions_trainable=True)
    gradient_engine_check(MODE_FULL)

    def forward_loss():
        ctx = sc.light.build_context()
        res = RenderPipeline(cfg, lut).forward(sc, cam, ctx, grid)
        return float((res.image * weights).sum()), res, ctx

    loss0, res, ctx = forward_loss()
    pipe = RenderPipeline(cfg, lut)
    grads = pipe.backward(res, weights)
    grads.light_raw = ctx.raw_gradient()

    groups = {
        "albedo": g.albedo, "rough": g.rough, "metal": g.metal, "alpha": g.alpha,
        "opacity": g.opacity, "sh": g.sh, "quat": g.quat, "log_scale": g.log_scale,
        "pos": g.pos, "light_raw": sc.light.raw,
    }
    per_group = max(3, int(np.ceil(min_probes / len(groups))))
    rows = []
    h = 1e-5
    for name, arr in groups.items():
        ana = grads.light_raw if name == "light_raw" else getattr(grads, name)
        flat = ana.reshape(-1)
        picks = np.argsort(-np.abs(flat))[:per_group]
        for k in picks:
            idx = np.unravel_index(k, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            lp, _, _ = forward_loss()
            arr[idx] = orig - h
            lm, _, _ = forward_loss()
            arr[idx] = orig
            fd = (lp - lm) / (2 * h)
            err = abs(flat[k] - fd)
            rel = err / max(abs(fd), abs(flat[k]), 1e-8)
            rows.append((name, tuple(int(i) for i in idx), flat[k], fd, rel))

    elem_failures = elementary_adjoint_checks()
    bad = [r for r in rows if r[4] > rel_tol]
    return {
        "passed": not bad and not elem_failures,
        "probes": len(rows),
        "max_rel_err": max(r[4] for r in rows),
        "failures": bad,
        "elementary_failures": elem_failures,
        "rows": rows,
    }
