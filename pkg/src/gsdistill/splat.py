"""Software Gaussian rasterizer: the first deferred pass.

Projects Gaussians through a pinhole camera, sorts them by center distance,
and alpha-composites shading attributes into screen-space G-buffer maps,
tile by tile (16 x 16).  Every forward quantity needed by the analytic
backward pass is kept on a per-tile tape.

Blending follows the usual front-to-back scheme: contribution weights are
w_i = a_i * T_i with a_i = min(opacity_i * G_i(pixel), 0.99) and T_i the
transmittance accumulated over nearer Gaussians.  Contributions decay to
zero smoothly (no hard skip threshold) so the image is differentiable in
every blend input; the per-tile binning radius is generous enough
(RADIUS_SIGMA standard deviations) that the truncated tails are below
finite-difference resolution.  All blended maps are premultiplied by
coverage = sum_i w_i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Camera, cube_face_cameras
from .scene import Scene, gaussian_normals, normalize_quats, quats_to_rotmats

TILE = 16
ALPHA_CLIP = 0.99
COV_DILATION = 0.3
Z_NEAR = 0.2  # matches the splatting baseline; also tames near-field EWA blowup
RADIUS_SIGMA = 4.5

# Fixed-attribute channel layout used by the blend matrix.
ATTR_ALBEDO = slice(0, 3)
ATTR_ROUGH = 3
ATTR_METAL = 4
ATTR_NORMAL = slice(5, 8)
ATTR_DEPTH = 8
ATTR_ALPHA = 9
N_ATTRS = 10


@dataclass
class ProjectedGaussians:
    """Depth-sorted per-frame geometry of the visible Gaussians."""

    idx: np.ndarray  # (M,) indices into the scene arrays
    pos: np.ndarray  # (M, 3) world centers
    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 2, 2), dilated
    cov2d_inv: np.ndarray  # (M, 2, 2)
    depth: np.ndarray  # (M,) center distance to camera
    radius: np.ndarray  # (M,) 3-sigma pixel radius
    normal: np.ndarray  # (M, 3) camera-facing shortest axis
    t_cam: np.ndarray  # (M, 3)
    rotmat: np.ndarray  # (M, 3, 3)
    scale: np.ndarray  # (M, 3) activated
    axis_idx: np.ndarray  # (M,)
    axis_sign: np.ndarray  # (M,)

    @property
    def count(self) -> int:
        return self.idx.shape[0]


def _clamped_lateral(cam: Camera, t: np.ndarray, tz: np.ndarray):
    """Clamp t_x, t_y to 1.3x the frustum half-extent (per unit depth)."""
    lim_x = 1.3 * (0.5 * cam.width / cam.fx)
    lim_y = 1.3 * (0.5 * cam.height / cam.fy)
    rx = t[:, 0] / tz
    ry = t[:, 1] / tz
    x_free = np.abs(rx) < lim_x
    y_free = np.abs(ry) < lim_y
    tx_c = np.clip(rx, -lim_x, lim_x) * tz
    ty_c = np.clip(ry, -lim_y, lim_y) * tz
    return tx_c, ty_c, x_free, y_free


def project_gaussians(scene: Scene, cam: Camera) -> ProjectedGaussians:
    """Project all Gaussians; cull behind-camera and fully off-screen ones."""
    g = scene.gaussians
    pos = g.pos
    t = cam.world_to_cam(pos)
    in_front = t[:, 2] > Z_NEAR
    qn = normalize_quats(g.quat)
    rot = quats_to_rotmats(qn)
    scale = np.exp(g.log_scale)

    tz = np.where(in_front, t[:, 2], 1.0)
    mean2d = np.stack(
        [cam.fx * t[:, 0] / tz + cam.cx, cam.fy * t[:, 1] / tz + cam.cy], axis=-1
    )
    # J = d(mean2d)/d(t); M = J @ R_wc; cov2d = M Sigma M^T + dilation.
    # The lateral offsets inside J are clamped to 1.3x the frustum extent so
    # far off-axis Gaussians do not smear unbounded footprints across the
    # image (the standard splatting guard).
    tx_c, ty_c, x_free, y_free = _clamped_lateral(cam, t, tz)
    j = np.zeros((pos.shape[0], 2, 3))
    j[:, 0, 0] = cam.fx / tz
    j[:, 0, 2] = -cam.fx * tx_c / (tz * tz)
    j[:, 1, 1] = cam.fy / tz
    j[:, 1, 2] = -cam.fy * ty_c / (tz * tz)
    m = j @ cam.r_wc
    sigma = rot * (scale**2)[:, None, :] @ np.swapaxes(rot, 1, 2)
    cov2d = m @ sigma @ np.swapaxes(m, 1, 2)
    cov2d[:, 0, 0] += COV_DILATION
    cov2d[:, 1, 1] += COV_DILATION

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    eig_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = RADIUS_SIGMA * np.sqrt(np.maximum(eig_max, 0.0))

    on_screen = (
        (mean2d[:, 0] + radius > 0)
        & (mean2d[:, 0] - radius < cam.width)
        & (mean2d[:, 1] + radius > 0)
        & (mean2d[:, 1] - radius < cam.height)
    )
    visible = in_front & on_screen
    cam_pos = cam.position
    depth = np.linalg.norm(pos - cam_pos, axis=1)
    order = np.argsort(depth[visible], kind="stable")
    sel = np.where(visible)[0][order]

    inv_det = 1.0 / det[sel]
    inv = np.empty((sel.shape[0], 2, 2))
    inv[:, 0, 0] = cov2d[sel, 1, 1] * inv_det
    inv[:, 1, 1] = cov2d[sel, 0, 0] * inv_det
    inv[:, 0, 1] = inv[:, 1, 0] = -cov2d[sel, 0, 1] * inv_det

    normal, axis_idx, axis_sign = gaussian_normals(rot[sel], scale[sel], pos[sel], cam_pos)
    return ProjectedGaussians(
        idx=sel,
        pos=pos[sel],
        mean2d=mean2d[sel],
        cov2d=cov2d[sel],
        cov2d_inv=inv,
        depth=depth[sel],
        radius=radius[sel],
        normal=normal,
        t_cam=t[sel],
        rotmat=rot[sel],
        scale=scale[sel],
        axis_idx=axis_idx,
        axis_sign=axis_sign,
    )


def project_gaussian(scene: Scene, index: int, cam: Camera):
    """Single-Gaussian projection: (mean2d, cov2d, depth) or None if culled."""
    sub = Scene(gaussians=scene.gaussians.select(np.array([index])), light=scene.light)
    proj = project_gaussians(sub, cam)
    if proj.count == 0:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])


@dataclass
class GBuffer:
    albedo: np.ndarray
    rough: np.ndarray
    metal: np.ndarray
    normal: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    raw: np.ndarray
    coverage: np.ndarray


@dataclass
class TileTape:
    y0: int
    x0: int
    h: int
    w: int
    sel: np.ndarray  # (K,) indices into the projected arrays
    g: np.ndarray  # (P, K) Gaussian footprint values
    alpha: np.ndarray  # (P, K) clipped contribution opacities
    trans: np.ndarray  # (P, K) exclusive transmittance
    weight: np.ndarray  # (P, K)
    clipped: np.ndarray  # (P, K) contributions pinned at ALPHA_CLIP


@dataclass
class RasterTape:
    proj: ProjectedGaussians
    attrs: np.ndarray  # (M, N_ATTRS)
    tiles: list[TileTape] = field(default_factory=list)
    raw_mode: str = "pixel"
    y16: np.ndarray | None = None  # (H, W, 16) basis on pixel rays
    center_color: np.ndarray | None = None  # (M, 3) for center mode
    center_basis: np.ndarray | None = None  # (M, 16) for center mode
    sh: np.ndarray | None = None  # (M, 16, 3)


def _pixel_basis(cam: Camera) -> np.ndarray:
    from .shmath import _basis_unchecked

    if "y16" not in cam._cache:
        cam._cache["y16"] = _basis_unchecked(cam.ray_dirs(), 4)
    return cam._cache["y16"]


def rasterize(
    scene: Scene,
    cam: Camera,
    proj: ProjectedGaussians | None = None,
    raw_mode: str = "pixel",
) -> tuple[GBuffer, RasterTape]:
    """Splat the scene into premultiplied G-buffer maps."""
    if scene.count == 0:
        raise ValueError("cannot rasterize an empty scene")
    if proj is None:
        proj = project_gaussians(scene, cam)
    h, w = cam.height, cam.width
    g = scene.gaussians
    m = proj.count

    attrs = np.zeros((m, N_ATTRS))
    from .scene import sigmoid

    attrs[:, ATTR_ALBEDO] = sigmoid(g.albedo[proj.idx])
    attrs[:, ATTR_ROUGH] = sigmoid(g.rough[proj.idx])
    attrs[:, ATTR_METAL] = sigmoid(g.metal[proj.idx])
    attrs[:, ATTR_NORMAL] = proj.normal
    attrs[:, ATTR_DEPTH] = proj.depth
    attrs[:, ATTR_ALPHA] = scene.activated_alpha()[proj.idx]

    sh = g.sh[proj.idx]
    tape = RasterTape(proj=proj, attrs=attrs, raw_mode=raw_mode, sh=sh)
    if raw_mode == "pixel":
        tape.y16 = _pixel_basis(cam)
    elif raw_mode == "center":
        from .shmath import _basis_unchecked

        d = g.pos[proj.idx] - cam.position
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        tape.center_basis = _basis_unchecked(d, 4)
        tape.center_color = np.einsum("mi,mic->mc", tape.center_basis, sh)
    else:
        raise ValueError(f"unknown raw_mode {raw_mode!r}")

    buf = GBuffer(
        albedo=np.zeros((h, w, 3)),
        rough=np.zeros((h, w)),
        metal=np.zeros((h, w)),
        normal=np.zeros((h, w, 3)),
        depth=np.zeros((h, w)),
        alpha=np.zeros((h, w)),
        raw=np.zeros((h, w, 3)),
        coverage=np.zeros((h, w)),
    )
    if m == 0:
        return buf, tape

    opac = scene.activated_opacity()[proj.idx]
    for y0 in range(0, h, TILE):
        th = min(TILE, h - y0)
        for x0 in range(0, w, TILE):
            tw = min(TILE, w - x0)
            sel = np.where(
                (proj.mean2d[:, 0] + proj.radius > x0)
                & (proj.mean2d[:, 0] - proj.radius < x0 + tw)
                & (proj.mean2d[:, 1] + proj.radius > y0)
                & (proj.mean2d[:, 1] - proj.radius < y0 + th)
            )[0]
            if sel.size == 0:
                continue
            jj, ii = np.meshgrid(
                x0 + np.arange(tw) + 0.5, y0 + np.arange(th) + 0.5
            )
            px = np.stack([jj.ravel(), ii.ravel()], axis=-1)  # (P, 2)
            dx = px[:, None, 0] - proj.mean2d[sel, 0][None, :]
            dy = px[:, None, 1] - proj.mean2d[sel, 1][None, :]
            a = proj.cov2d_inv[sel]
            e = -0.5 * (
                a[None, :, 0, 0] * dx * dx
                + 2.0 * a[None, :, 0, 1] * dx * dy
                + a[None, :, 1, 1] * dy * dy
            )
            gval = np.exp(e)
            a_pre = opac[sel][None, :] * gval
            clipped = a_pre > ALPHA_CLIP
            alpha = np.minimum(a_pre, ALPHA_CLIP)
            trans = np.cumprod(1.0 - alpha, axis=1)
            trans = np.concatenate([np.ones((alpha.shape[0], 1)), trans[:, :-1]], axis=1)
            weight = alpha * trans

            blended = weight @ attrs[sel]  # (P, N_ATTRS)
            if raw_mode == "pixel":
                ytile = tape.y16[y0 : y0 + th, x0 : x0 + tw].reshape(-1, 16)
                # raw[p] = Y[p] . (sum_k w[p,k] sh[k]); one BLAS product
                wsh = (weight @ sh[sel].reshape(-1, 48)).reshape(-1, 16, 3)
                raw = (ytile[:, :, None] * wsh).sum(axis=1)
            else:
                raw = weight @ tape.center_color[sel]
            cov = weight.sum(axis=1)

            view = np.s_[y0 : y0 + th, x0 : x0 + tw]
            buf.albedo[view] = blended[:, ATTR_ALBEDO].reshape(th, tw, 3)
            buf.rough[view] = blended[:, ATTR_ROUGH].reshape(th, tw)
            buf.metal[view] = blended[:, ATTR_METAL].reshape(th, tw)
            buf.normal[view] = blended[:, ATTR_NORMAL].reshape(th, tw, 3)
            buf.depth[view] = blended[:, ATTR_DEPTH].reshape(th, tw)
            buf.alpha[view] = blended[:, ATTR_ALPHA].reshape(th, tw)
            buf.raw[view] = raw.reshape(th, tw, 3)
            buf.coverage[view] = cov.reshape(th, tw)
            tape.tiles.append(
                TileTape(y0, x0, th, tw, sel, gval, alpha, trans, weight, clipped)
            )
    return buf, tape


@dataclass
class SplatGrads:
    """Adjoints w.r.t. the per-visible-Gaussian inputs of the blend."""

    d_attrs: np.ndarray  # (M, N_ATTRS) activated attribute adjoints
    d_opacity: np.ndarray  # (M,) activated opacity adjoints
    d_sh: np.ndarray  # (M, 16, 3)
    d_mean2d: np.ndarray  # (M, 2)
    d_cov2d: np.ndarray  # (M, 2, 2)


def rasterize_backward(tape: RasterTape, d_buf: GBuffer, opac: np.ndarray) -> SplatGrads:
    """Propagate G-buffer map adjoints back to blend inputs.

    ``d_buf`` reuses the GBuffer container for the adjoint maps; ``opac``
    is the activated opacity of the visible Gaussians (tape order).
    """
    proj = tape.proj
    m = proj.count
    grads = SplatGrads(
        d_attrs=np.zeros((m, N_ATTRS)),
        d_opacity=np.zeros(m),
        d_sh=np.zeros((m, 16, 3)),
        d_mean2d=np.zeros((m, 2)),
        d_cov2d=np.zeros((m, 2, 2)),
    )
    for t in tape.tiles:
        view = np.s_[t.y0 : t.y0 + t.h, t.x0 : t.x0 + t.w]
        d_blend = np.zeros((t.h * t.w, N_ATTRS))
        d_blend[:, ATTR_ALBEDO] = d_buf.albedo[view].reshape(-1, 3)
        d_blend[:, ATTR_ROUGH] = d_buf.rough[view].reshape(-1)
        d_blend[:, ATTR_METAL] = d_buf.metal[view].reshape(-1)
        d_blend[:, ATTR_NORMAL] = d_buf.normal[view].reshape(-1, 3)
        d_blend[:, ATTR_DEPTH] = d_buf.depth[view].reshape(-1)
        d_blend[:, ATTR_ALPHA] = d_buf.alpha[view].reshape(-1)
        d_raw = d_buf.raw[view].reshape(-1, 3)
        d_cov = d_buf.coverage[view].reshape(-1)

        sel = t.sel
        attrs_sel = tape.attrs[sel]
        # d(weight): fixed attrs + raw + coverage contributions
        dw = d_blend @ attrs_sel.T + d_cov[:, None]
        if tape.raw_mode == "pixel":
            ytile = tape.y16[view].reshape(-1, 16)
            # factor the P x K x 48 contraction through a (P, 48) matrix
            e = (ytile[:, :, None] * d_raw[:, None, :]).reshape(-1, 48)
            dw += e @ tape.sh[sel].reshape(-1, 48).T
            grads.d_sh[sel] += (t.weight.T @ e).reshape(-1, 16, 3)
        else:
            dw += d_raw @ tape.center_color[sel].T
            d_center = t.weight.T @ d_raw  # (K, 3)
            grads.d_sh[sel] += np.einsum("ki,kc->kic", tape.center_basis[sel], d_center)

        grads.d_attrs[sel] += t.weight.T @ d_blend

        # d(alpha): direct T_k term minus the suffix coupling through T.
        wdw = t.weight * dw
        suffix = np.flip(np.cumsum(np.flip(wdw, axis=1), axis=1), axis=1) - wdw
        da = t.trans * dw - suffix / np.maximum(1.0 - t.alpha, 1e-6)
        da *= ~t.clipped

        grads.d_opacity[sel] += (da * t.g).sum(axis=0)
        dg = da * opac[sel][None, :]

        # d(gaussian footprint) -> mean2d, cov2d_inv -> cov2d
        jj, ii = np.meshgrid(
            t.x0 + np.arange(t.w) + 0.5, t.y0 + np.arange(t.h) + 0.5
        )
        px = np.stack([jj.ravel(), ii.ravel()], axis=-1)
        dx = px[:, None, 0] - proj.mean2d[sel, 0][None, :]
        dy = px[:, None, 1] - proj.mean2d[sel, 1][None, :]
        a = proj.cov2d_inv[sel]
        qx = a[None, :, 0, 0] * dx + a[None, :, 0, 1] * dy
        qy = a[None, :, 0, 1] * dx + a[None, :, 1, 1] * dy
        coef = dg * t.g
        grads.d_mean2d[sel, 0] += (coef * qx).sum(axis=0)
        grads.d_mean2d[sel, 1] += (coef * qy).sum(axis=0)
        # dE/dA = -0.5 * Delta Delta^T; dA/dC = -A (.) A
        d_a00 = (coef * (-0.5) * dx * dx).sum(axis=0)
        d_a01 = (coef * (-1.0) * dx * dy).sum(axis=0)
        d_a11 = (coef * (-0.5) * dy * dy).sum(axis=0)
        d_ainv = np.zeros((sel.size, 2, 2))
        d_ainv[:, 0, 0] = d_a00
        d_ainv[:, 0, 1] = d_ainv[:, 1, 0] = 0.5 * d_a01
        d_ainv[:, 1, 1] = d_a11
        grads.d_cov2d[sel] += -a @ d_ainv @ a
    return grads


def geometry_backward(
    proj: ProjectedGaussians,
    cam: Camera,
    grads: SplatGrads,
    d_normal: np.ndarray,
    d_depth: np.ndarray,
    positions_trainable: bool,
):
    """Chain mean2d/cov2d/normal/depth adjoints to raw geometry parameters.

    Returns (d_pos, d_quat_normalized, d_scale_activated) in tape order.
    """
    m = proj.count
    fx, fy = cam.fx, cam.fy
    t = proj.t_cam
    tz = t[:, 2]

    tx_c, ty_c, x_free, y_free = _clamped_lateral(cam, t, tz)
    j = np.zeros((m, 2, 3))
    j[:, 0, 0] = fx / tz
    j[:, 0, 2] = -fx * tx_c / (tz * tz)
    j[:, 1, 1] = fy / tz
    j[:, 1, 2] = -fy * ty_c / (tz * tz)
    mj = j @ cam.r_wc
    sigma = proj.rotmat * (proj.scale**2)[:, None, :] @ np.swapaxes(proj.rotmat, 1, 2)

    d_cov = grads.d_cov2d
    d_sigma = np.swapaxes(mj, 1, 2) @ d_cov @ mj

    # Sigma = R diag(s^2) R^T: d_sigma is symmetric by construction
    d_r = 2.0 * d_sigma @ proj.rotmat * (proj.scale**2)[:, None, :]
    dd = np.einsum("nji,njk,nkl->nil", proj.rotmat, d_sigma, proj.rotmat)
    d_scale = 2.0 * proj.scale * np.stack([dd[:, 0, 0], dd[:, 1, 1], dd[:, 2, 2]], -1)

    # normal n = sign * R[:, k]
    dn = d_normal * proj.axis_sign[:, None]
    k = proj.axis_idx
    rows = np.arange(m)
    for c in range(3):
        d_r[rows, c, k] += dn[:, c]

    d_pos = np.zeros((m, 3))
    if positions_trainable:
        # mean2d uses the unclamped projection: d(mean2d)/dt
        j_mean = np.zeros((m, 2, 3))
        j_mean[:, 0, 0] = fx / tz
        j_mean[:, 0, 2] = -fx * t[:, 0] / (tz * tz)
        j_mean[:, 1, 1] = fy / tz
        j_mean[:, 1, 2] = -fy * t[:, 1] / (tz * tz)
        d_t = np.einsum("nij,ni->nj", j_mean, grads.d_mean2d)
        # J itself depends on the camera-space position (clamp-aware)
        d_m = (d_cov + np.swapaxes(d_cov, 1, 2)) @ mj @ sigma
        d_j = d_m @ cam.r_wc.T
        d_t[:, 0] += d_j[:, 0, 2] * (-fx / tz**2) * x_free
        d_t[:, 1] += d_j[:, 1, 2] * (-fy / tz**2) * y_free
        d_t[:, 2] += (
            d_j[:, 0, 0] * (-fx / tz**2)
            + d_j[:, 0, 2] * np.where(x_free, 2.0, 1.0) * fx * tx_c / tz**3
            + d_j[:, 1, 1] * (-fy / tz**2)
            + d_j[:, 1, 2] * np.where(y_free, 2.0, 1.0) * fy * ty_c / tz**3
        )
        d_pos = d_t @ cam.r_wc
        to_cam = proj.pos - cam.position[None, :]
        d_pos += d_depth[:, None] * to_cam / np.maximum(proj.depth, 1e-9)[:, None]
    return d_pos, d_r, d_scale


def render_opacity_cubemap(scene: Scene, center: np.ndarray, face_res: int) -> np.ndarray:
    """Transmittance-to-background cubemap: 1 everywhere nothing occludes.

    Splats all Gaussians as pure opacity from six 90-degree face cameras;
    the stored value per texel is the final transmittance T (black Gaussians
    over a white background).
    """
    if face_res < 16:
        raise ValueError("face resolution must be at least 16")
    faces = np.empty((6, face_res, face_res))
    opac_all = scene.activated_opacity()
    for f, cam in enumerate(cube_face_cameras(center, face_res)):
        proj = project_gaussians(scene, cam)
        if proj.count == 0:
            faces[f] = 1.0
            continue
        jj, ii = np.meshgrid(np.arange(face_res) + 0.5, np.arange(face_res) + 0.5)
        px = np.stack([jj.ravel(), ii.ravel()], axis=-1)
        dx = px[:, None, 0] - proj.mean2d[None, :, 0]
        dy = px[:, None, 1] - proj.mean2d[None, :, 1]
        a = proj.cov2d_inv
        e = -0.5 * (
            a[None, :, 0, 0] * dx * dx
            + 2 * a[None, :, 0, 1] * dx * dy
            + a[None, :, 1, 1] * dy * dy
        )
        a_pre = opac_all[proj.idx][None, :] * np.exp(e)
        alpha = np.minimum(a_pre, ALPHA_CLIP)
        faces[f] = np.prod(1.0 - alpha, axis=1).reshape(face_res, face_res)
    return faces
