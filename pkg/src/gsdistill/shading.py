"""Deferred shading: assemble per-pixel radiance from the G-buffer, the
prefiltered light, the visibility grid and the BRDF table; tone map and
convert to display space.

The physical branch is ACES tone-mapped and sRGB-encoded before it is
blended with the raw radiance branch, which is treated as display-referred
(it is fitted directly against display-space images, as in the raw-only
baseline).  Per covered pixel:

    final = alpha * srgb(aces(I_phy)) + (1 - alpha) * I_raw

composited over the background with the coverage map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import shmath
from .brdf import DIELECTRIC_F0, BrdfLut
from .cubemap import BilinearTaps
from .envlight import LightContext
from .splat import GBuffer

COVERAGE_EPS = 1e-4
NORMAL_EPS = 1e-9
NDV_MIN = 1e-4

MODE_RAW = "raw"
MODE_SPEC = "spec"
MODE_FULL = "full"


def aces_tonemap(x):
    """Rational ACES filmic fit, clamped to [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    return np.clip((x * (2.51 * x + 0.03)) / (x * (2.43 * x + 0.59) + 0.14), 0.0, 1.0)


def aces_tonemap_grad(x):
    x = np.asarray(x, dtype=np.float64)
    num = x * (2.51 * x + 0.03)
    den = x * (2.43 * x + 0.59) + 0.14
    raw = num / den
    grad = ((5.02 * x + 0.03) * den - num * (4.86 * x + 0.59)) / (den * den)
    return np.where((raw > 0.0) & (raw < 1.0), grad, 0.0)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1.0 / 2.4) - 0.055)


def linear_to_srgb_grad(x):
    x = np.asarray(x, dtype=np.float64)
    inside = (x >= 0.0) & (x <= 1.0)
    lo = x <= 0.0031308
    safe = np.maximum(x, 1e-12)
    grad = np.where(lo, 12.92, (1.055 / 2.4) * safe ** (1.0 / 2.4 - 1.0))
    return np.where(inside, grad, 0.0)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


@dataclass
class ShadedFrame:
    """Final image plus the linear intermediates and the backward tape."""

    image: np.ndarray  # (H, W, 3) display space, background composited
    i_raw: np.ndarray  # (H, W, 3) premultiplied raw radiance
    i_diff: np.ndarray  # (H, W, 3) linear, covered pixels only
    i_spec: np.ndarray
    i_phy: np.ndarray
    alpha: np.ndarray  # (H, W) premultiplied distillation progress
    coverage: np.ndarray
    tape: dict | None = None


def shade(
    gbuf: GBuffer,
    cam,
    light_ctx: LightContext | None,
    lut: BrdfLut | None,
    grid,
    mode: str = MODE_FULL,
    background=(0.0, 0.0, 0.0),
    tensor=None,
) -> ShadedFrame:
    """Second deferred pass over the splatted maps."""
    h, w = gbuf.coverage.shape
    bg = np.asarray(background, dtype=np.float64)
    final = gbuf.raw.copy()
    frame = ShadedFrame(
        image=final,
        i_raw=gbuf.raw,
        i_diff=np.zeros((h, w, 3)),
        i_spec=np.zeros((h, w, 3)),
        i_phy=np.zeros((h, w, 3)),
        alpha=gbuf.alpha,
        coverage=gbuf.coverage,
    )
    if mode == MODE_RAW:
        final += (1.0 - gbuf.coverage)[..., None] * bg
        frame.tape = {"mode": mode, "bg": bg}
        return frame

    if light_ctx is None or lut is None:
        raise ValueError("full shading needs a light context and a BRDF LUT")
    if tensor is None:
        tensor = shmath.triple_product_tensor(3)

    cov = gbuf.coverage
    n_norm = np.linalg.norm(gbuf.normal, axis=-1)
    mask = (cov > COVERAGE_EPS) & (n_norm > NORMAL_EPS)
    tape = {
        "mode": mode,
        "bg": bg,
        "mask": mask,
        "tensor": tensor,
    }
    frame.tape = tape
    if not np.any(mask):
        final += (1.0 - cov)[..., None] * bg
        return frame

    inv = 1.0 / cov[mask]
    alb = gbuf.albedo[mask] * inv[:, None]
    rough = gbuf.rough[mask] * inv
    metal = np.ones_like(rough) if mode == MODE_SPEC else gbuf.metal[mask] * inv
    alpha_n = gbuf.alpha[mask] * inv
    depth_n = gbuf.depth[mask] * inv
    n_pm = gbuf.normal[mask]
    norm = n_norm[mask]
    n = n_pm / norm[:, None]

    rays = cam.ray_dirs()[mask]
    cam_pos = cam.position
    x = cam_pos[None, :] + rays * depth_n[:, None]

    if grid is not None:
        v_sh, vis_tape = grid.query(x)
    else:
        v_sh = np.zeros((x.shape[0], 9))
        v_sh[:, 0] = shmath.UNOCCLUDED_DC
        vis_tape = None

    # diffuse: c/pi * <C(l, v), rho(n)>
    bmats = [tensor.contract_right(light_ctx.sh[c]) for c in range(3)]
    rho = shmath.cosine_lobe_coeffs(n)
    p_sh = np.stack([v_sh @ bm.T for bm in bmats], axis=1)  # (Q, 3, 9)
    irr = np.einsum("qci,qi->qc", p_sh, rho)
    i_diff = alb * irr / np.pi

    # specular split-sum
    view = -rays
    dot_raw = (n * view).sum(-1)
    ndv = np.clip(dot_raw, NDV_MIN, 1.0)
    refl = 2.0 * dot_raw[:, None] * n - view

    env = light_ctx.env
    l0, frac = env.level_and_frac(np.clip(rough, 0.0, 1.0))
    levels = np.unique(l0)
    spec_env = np.empty((refl.shape[0], 3))
    lookup_tape = []
    for lv in levels:
        sel = np.where(l0 == lv)[0]
        taps_a = BilinearTaps(refl[sel], env.levels[lv].shape[1])
        taps_b = BilinearTaps(refl[sel], env.levels[lv + 1].shape[1])
        sa = taps_a.gather(env.levels[lv])
        sb = taps_b.gather(env.levels[lv + 1])
        f = frac[sel][:, None]
        spec_env[sel] = sa * (1 - f) + sb * f
        lookup_tape.append((int(lv), sel, taps_a, taps_b, sa, sb))

    scale, bias, ds_du, db_du, ds_dv, db_dv = lut.lookup_with_grads(ndv, rough)
    f0 = metal[:, None] * alb + (1.0 - metal)[:, None] * DIELECTRIC_F0
    i_spec = spec_env * (f0 * scale[:, None] + bias[:, None])
    i_phy = (1.0 - metal)[:, None] * i_diff + i_spec

    # SH ringing can push the diffuse term slightly negative; the tone
    # curve is defined on [0, inf) so clamp first (zero gradient below).
    aces_in = np.maximum(i_phy, 0.0)
    aces_out = aces_tonemap(aces_in)
    disp = linear_to_srgb(aces_out)

    alpha_pm = gbuf.alpha[mask]
    final[mask] = alpha_pm[:, None] * disp + (1.0 - alpha_n)[:, None] * gbuf.raw[mask]
    final += (1.0 - cov)[..., None] * bg

    frame.i_diff[mask] = i_diff
    frame.i_spec[mask] = i_spec
    frame.i_phy[mask] = i_phy

    tape.update(
        inv=inv, alb=alb, rough=rough, metal=metal, alpha_n=alpha_n,
        depth_n=depth_n, n=n, norm=norm, rays=rays, v_sh=v_sh, vis_tape=vis_tape,
        bmats=bmats, rho=rho, p_sh=p_sh, irr=irr, i_diff=i_diff,
        dot_raw=dot_raw, ndv=ndv, refl=refl, frac=frac, lookup_tape=lookup_tape,
        scale=scale, bias=bias, ds_du=ds_du, db_du=db_du, ds_dv=ds_dv, db_dv=db_dv,
        f0=f0, spec_env=spec_env, aces_in=aces_in, aces_out=aces_out,
        i_phy_sign=(i_phy > 0.0).astype(np.float64),
        alpha_pm=alpha_pm, raw_pm=gbuf.raw[mask], disp=disp,
        n_levels=env.n_levels,
    )
    return frame


def shade_backward(
    frame: ShadedFrame,
    gbuf: GBuffer,
    d_image: np.ndarray,
    light_ctx: LightContext | None = None,
) -> GBuffer:
    """Propagate final-image adjoints to G-buffer maps and light adjoints.

    Returns a GBuffer container holding the adjoint maps; light SH and
    prefiltered-level adjoints are accumulated into ``light_ctx``.
    """
    t = frame.tape
    bg = t["bg"]
    h, w = gbuf.coverage.shape
    d = GBuffer(
        albedo=np.zeros((h, w, 3)),
        rough=np.zeros((h, w)),
        metal=np.zeros((h, w)),
        normal=np.zeros((h, w, 3)),
        depth=np.zeros((h, w)),
        alpha=np.zeros((h, w)),
        raw=np.zeros((h, w, 3)),
        coverage=np.zeros((h, w)),
    )
    # background compositing: final += (1 - cov) * bg everywhere
    d.coverage -= d_image @ bg

    if t["mode"] == MODE_RAW:
        d.raw += d_image
        return d

    mask = t["mask"]
    d.raw[~mask] += d_image[~mask]
    if not np.any(mask):
        return d
    dm = d_image[mask]  # (Q, 3)

    inv = t["inv"]
    alpha_n = t["alpha_n"]

    # final = alpha_pm * disp + (1 - alpha_n) * raw_pm
    d.alpha[mask] += (dm * t["disp"]).sum(-1)
    d_disp = dm * t["alpha_pm"][:, None]
    d_alpha_n = -(dm * t["raw_pm"]).sum(-1)
    d.raw[mask] += dm * (1.0 - alpha_n)[:, None]

    d_aces = d_disp * linear_to_srgb_grad(t["aces_out"])
    d_phy = d_aces * aces_tonemap_grad(t["aces_in"]) * (t["i_phy_sign"])

    metal = t["metal"]
    spec_mode = t["mode"] == MODE_SPEC
    d_metal = np.zeros_like(metal)
    if not spec_mode:
        d_metal -= (d_phy * t["i_diff"]).sum(-1)
    d_idiff = d_phy * (1.0 - metal)[:, None]
    d_ispec = d_phy

    # i_spec = spec_env * (f0 * scale + bias)
    sc = t["scale"][:, None]
    d_env_val = d_ispec * (t["f0"] * sc + t["bias"][:, None])
    d_f0 = d_ispec * t["spec_env"] * sc
    d_scale = (d_ispec * t["spec_env"] * t["f0"]).sum(-1)
    d_bias = (d_ispec * t["spec_env"]).sum(-1)

    alb = t["alb"]
    d_alb = d_f0 * metal[:, None]
    if not spec_mode:
        d_metal += (d_f0 * (alb - DIELECTRIC_F0)).sum(-1)

    # LUT lookup
    d_ndv = d_scale * t["ds_du"] + d_bias * t["db_du"]
    d_rough = d_scale * t["ds_dv"] + d_bias * t["db_dv"]

    # trilinear environment lookup
    if light_ctx is None:
        raise ValueError("shade_backward needs the light context of the forward pass")
    env_levels = light_ctx.env.levels
    q = t["refl"].shape[0]
    d_refl = np.zeros((q, 3))
    d_frac = np.zeros(q)
    for lv, sel, taps_a, taps_b, sa, sb in t["lookup_tape"]:
        adj = d_env_val[sel]
        f = t["frac"][sel][:, None]
        light_ctx.add_level_adjoint(lv, taps_a, adj * (1 - f))
        light_ctx.add_level_adjoint(lv + 1, taps_b, adj * f)
        d_refl[sel] += np.einsum(
            "ncb,nc->nb", taps_a.gather_grad_dir(env_levels[lv]), adj * (1 - f)
        )
        d_refl[sel] += np.einsum(
            "ncb,nc->nb", taps_b.gather_grad_dir(env_levels[lv + 1]), adj * f
        )
        d_frac[sel] += (adj * (sb - sa)).sum(-1)
    rough_free = (t["rough"] > 0.0) & (t["rough"] < 1.0)
    d_rough += d_frac * (t["n_levels"] - 1) * rough_free

    # refl = 2 (n.view) n - view
    n = t["n"]
    view = -t["rays"]
    dot_raw = t["dot_raw"]
    d_n = 2.0 * dot_raw[:, None] * d_refl
    d_dot = 2.0 * (d_refl * n).sum(-1)
    ndv_free = (dot_raw > NDV_MIN) & (dot_raw < 1.0)
    d_dot += d_ndv * ndv_free
    d_n += d_dot[:, None] * view

    # diffuse backward
    irr = t["irr"]
    d_alb += d_idiff * irr / np.pi
    d_irr = d_idiff * alb / np.pi  # (Q, 3)
    rho = t["rho"]
    p_sh = t["p_sh"]
    d_p = d_irr[:, :, None] * rho[:, None, :]  # (Q, 3, 9)
    d_rho = (d_irr[:, :, None] * p_sh).sum(1)  # (Q, 9)
    d_n += np.einsum("qi,qib->qb", d_rho, shmath.cosine_lobe_jacobian(n))

    v_sh = t["v_sh"]
    d_vsh = np.zeros_like(v_sh)
    tensor = t["tensor"]
    d_l = np.zeros((3, 9))
    for c in range(3):
        d_vsh += d_p[:, c, :] @ t["bmats"][c]
        dpv = d_p[:, c, :].T @ v_sh  # (9, 9): sum_q d_p[q,i] v[q,k]
        np.add.at(d_l[c], tensor.j, tensor.value * dpv[tensor.i, tensor.k])
    light_ctx.add_sh_adjoint(d_l)

    d_depth_n = np.zeros_like(t["depth_n"])
    if t["vis_tape"] is not None:
        d_x = t["vis_tape"].backward_position(d_vsh)
        d_depth_n += (d_x * t["rays"]).sum(-1)

    # normalize backward: n = n_pm / |n_pm|
    d_npm = (d_n - n * (n * d_n).sum(-1, keepdims=True)) / t["norm"][:, None]
    d.normal[mask] += d_npm

    # normalized-field backward: f_n = f_pm / cov
    cov_adj = np.zeros(q)

    def through_div(d_fn, f_n):
        nonlocal cov_adj
        if d_fn.ndim == 1:
            cov_adj -= d_fn * f_n * inv
            return d_fn * inv
        cov_adj -= (d_fn * f_n).sum(-1) * inv
        return d_fn * inv[:, None]

    d.albedo[mask] += through_div(d_alb, alb)
    d.rough[mask] += through_div(d_rough, t["rough"])
    if not spec_mode:
        d.metal[mask] += through_div(d_metal, metal)
    d.alpha[mask] += through_div(d_alpha_n, alpha_n)
    d.depth[mask] += through_div(d_depth_n, t["depth_n"])
    d.coverage[mask] += cov_adj
    return d
