"""HDR environment light: learnable cubemap with exponential activation,
prefiltered mip pyramid for the split-sum specular path, order-3 SH
projection for the diffuse path, and the neutral-white regularizer.

The prefilter is a fixed linear operator on the activated texels (the GGX
sample pattern is deterministic per level), so training-time rebuilds and
their adjoints are sparse matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import cubemap, shmath
from .brdf import A_MIN, ggx_sample_h, hammersley, tangent_frame

MIN_LEVEL_RES = 8


def level_resolutions(res: int, levels: int) -> list[int]:
    return [max(res >> lv, MIN_LEVEL_RES) for lv in range(levels)]


def level_roughness(levels: int) -> np.ndarray:
    """Roughness assigned to each level: linear in r from 0 to 1."""
    return np.arange(levels) / (levels - 1)


def _prefilter_dirs_weights(out_dir: np.ndarray, roughness: float, samples: int):
    """GGX-prefilter sample directions and weights around one direction.

    Treats normal = view = out_dir as usual for split-sum prefiltering;
    weights are the clamped n.l terms, normalized to sum to 1.
    """
    a = max(roughness * roughness, A_MIN)
    h_local = ggx_sample_h(hammersley(samples), a)
    t, b = tangent_frame(out_dir)
    h = h_local[:, 0:1] * t + h_local[:, 1:2] * b + h_local[:, 2:3] * out_dir
    l = 2.0 * (h @ out_dir)[:, None] * h - out_dir
    w = np.maximum(l @ out_dir, 0.0)
    keep = w > 0.0
    return l[keep], w[keep] / w[keep].sum()


class PrefilterOperator:
    """Sparse linear maps from a base cubemap to each mip level.

    Level 0 is the identity (r ~ 0).  Level ell >= 1 rows are the
    bilinear-tap footprints of the GGX sample fans, so both the forward
    filter and its adjoint are single sparse products per level.
    """

    _cache: dict[tuple[int, int, int], "PrefilterOperator"] = {}

    def __init__(self, res: int, levels: int, samples: int):
        if levels < 4:
            raise ValueError("prefilter pyramid needs at least 4 levels")
        self.res = res
        self.levels = levels
        self.samples = samples
        self.resolutions = level_resolutions(res, levels)
        self.roughness = level_roughness(levels)
        self.mats: list[sparse.csr_matrix | None] = [None]
        n_base = 6 * res * res
        for lv in range(1, levels):
            rl = self.resolutions[lv]
            dirs = cubemap.all_dirs(rl).reshape(-1, 3)
            rows, cols, vals = [], [], []
            for t_idx, d in enumerate(dirs):
                l, w = _prefilter_dirs_weights(d, self.roughness[lv], samples)
                taps = cubemap.BilinearTaps(l, res)
                rows.append(np.full(taps.idx.size, t_idx))
                cols.append(taps.idx.reshape(-1))
                vals.append((taps.w * w[:, None]).reshape(-1))
            mat = sparse.coo_matrix(
                (
                    np.concatenate(vals),
                    (np.concatenate(rows), np.concatenate(cols)),
                ),
                shape=(dirs.shape[0], n_base),
            ).tocsr()
            self.mats.append(mat)

    @classmethod
    def get(cls, res: int, levels: int, samples: int) -> "PrefilterOperator":
        key = (res, levels, samples)
        if key not in cls._cache:
            cls._cache[key] = cls(res, levels, samples)
        return cls._cache[key]

    def apply(self, base: np.ndarray) -> list[np.ndarray]:
        """base (6, R, R, 3) -> list of per-level maps."""
        flat = base.reshape(-1, 3)
        out = [base]
        for lv in range(1, self.levels):
            rl = self.resolutions[lv]
            out.append((self.mats[lv] @ flat).reshape(6, rl, rl, 3))
        return out

    def adjoint(self, level_adjoints: list[np.ndarray]) -> np.ndarray:
        """Accumulate d(levels) back onto the base texels."""
        acc = level_adjoints[0].reshape(-1, 3).copy()
        for lv in range(1, self.levels):
            adj = level_adjoints[lv]
            if adj is None:
                continue
            acc += self.mats[lv].T @ adj.reshape(-1, 3)
        return acc.reshape(6, self.res, self.res, 3)


@dataclass
class PrefilteredEnv:
    """Mip pyramid of GGX-prefiltered radiance, level 0 = unfiltered."""

    levels: list[np.ndarray]
    roughness: np.ndarray

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def level_and_frac(self, r):
        f = np.clip(np.asarray(r, dtype=np.float64), 0.0, 1.0) * (self.n_levels - 1)
        l0 = np.minimum(f.astype(np.int64), self.n_levels - 2)
        return l0, f - l0


def prefilter(base: np.ndarray, levels: int = 5, samples: int = 1024) -> PrefilteredEnv:
    """Build the pyramid by streaming GGX-weighted averages (full quality).

    Used for final rendering and relighting; training iterations use the
    cached sparse ``PrefilterOperator`` at a reduced sample count instead.
    """
    if levels < 4:
        raise ValueError("prefilter pyramid needs at least 4 levels")
    res = base.shape[1]
    rough = level_roughness(levels)
    out = [np.array(base, dtype=np.float64)]
    for lv in range(1, levels):
        rl = max(res >> lv, MIN_LEVEL_RES)
        dirs = cubemap.all_dirs(rl).reshape(-1, 3)
        texels = np.empty((dirs.shape[0], 3))
        for t_idx, d in enumerate(dirs):
            l, w = _prefilter_dirs_weights(d, rough[lv], samples)
            texels[t_idx] = w @ cubemap.sample_faces(base, l)
        out.append(texels.reshape(6, rl, rl, 3))
    return PrefilteredEnv(out, rough)


def prefiltered_from_operator(base: np.ndarray, op: PrefilterOperator) -> PrefilteredEnv:
    return PrefilteredEnv(op.apply(base), op.roughness)


def sample_dir(base: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Bilinear radiance sample of a (6, R, R, 3) map at unit directions."""
    return cubemap.sample_faces(base, dirs)


def specular_lookup(env: PrefilteredEnv, reflect_dirs: np.ndarray, r) -> np.ndarray:
    """Trilinear lookup: bilinear on faces, linear across mip levels."""
    shape_in = np.asarray(reflect_dirs).shape[:-1]
    r_arr = np.broadcast_to(np.asarray(r, dtype=np.float64), shape_in)
    l0, frac = env.level_and_frac(r_arr)
    d = np.asarray(reflect_dirs, dtype=np.float64).reshape(-1, 3)
    l0 = np.asarray(l0).reshape(-1)
    frac = np.asarray(frac).reshape(-1)
    out = np.empty((d.shape[0], 3))
    for lv in np.unique(l0):
        m = l0 == lv
        a = cubemap.sample_faces(env.levels[lv], d[m])
        b = cubemap.sample_faces(env.levels[lv + 1], d[m])
        out[m] = a * (1 - frac[m, None]) + b * frac[m, None]
    shape = np.asarray(reflect_dirs).shape[:-1]
    return out.reshape(shape + (3,))


def light_white_loss(base: np.ndarray) -> float:
    """Mean texel deviation of each channel from the texel's channel mean."""
    mean = base.mean(axis=-1, keepdims=True)
    return float(np.abs(base - mean).sum(axis=-1).mean())


def light_white_loss_grad(base: np.ndarray) -> np.ndarray:
    """d(loss)/d(texel values); subgradient of the L1 deviations."""
    mean = base.mean(axis=-1, keepdims=True)
    sgn = np.sign(base - mean)
    n_texels = base.size // 3
    return (sgn - sgn.mean(axis=-1, keepdims=True)) / n_texels


def project_light_sh(base: np.ndarray) -> np.ndarray:
    """(3, 9) order-3 coefficients of the activated radiance."""
    return shmath.project_cubemap_to_sh(base, order=3)


class LightModel:
    """Raw (log-radiance) cubemap parameters plus cached linear operators."""

    def __init__(self, raw: np.ndarray, levels: int | None = None, train_samples: int = 64):
        self.raw = np.asarray(raw, dtype=np.float64)
        res = self.raw.shape[1]
        if levels is None:
            levels = max(4, int(np.log2(res / MIN_LEVEL_RES)) + 1)
        self.levels = levels
        self.train_samples = train_samples
        self.op = PrefilterOperator.get(res, levels, train_samples)
        self.proj = shmath.projection_matrix(res, 3)  # (texels, 9)

    @classmethod
    def from_radiance(cls, radiance: np.ndarray, **kw) -> "LightModel":
        return cls(np.log(np.maximum(radiance, 1e-12)), **kw)

    @property
    def res(self) -> int:
        return self.raw.shape[1]

    def activated(self) -> np.ndarray:
        return np.exp(self.raw)

    def build_context(self) -> "LightContext":
        base = self.activated()
        env = prefiltered_from_operator(base, self.op)
        sh = (base.reshape(-1, 3).T @ self.proj)  # (3, 9)
        return LightContext(self, base, env, sh)


class LightContext:
    """Per-iteration snapshot: activated base, pyramid, SH, and adjoints.

    Contexts built from a bare radiance map (``from_radiance``) support
    forward rendering only; the raw-gradient path needs the owning model.
    """

    def __init__(self, model: LightModel | None, base, env: PrefilteredEnv, sh):
        self.model = model
        self.base = base
        self.env = env
        self.sh = sh
        self._level_adj = [np.zeros_like(lv) for lv in env.levels]
        self._sh_adj = np.zeros_like(sh)
        self._base_adj_direct = np.zeros_like(base)

    @classmethod
    def from_radiance(cls, radiance: np.ndarray, levels: int | None = None,
                      samples: int = 1024) -> "LightContext":
        """Full-quality context for final rendering and relighting."""
        base = np.asarray(radiance, dtype=np.float64)
        res = base.shape[1]
        if levels is None:
            levels = max(4, int(np.log2(max(res // MIN_LEVEL_RES, 1))) + 1)
        env = prefilter(base, levels=levels, samples=samples)
        sh = shmath.project_cubemap_to_sh(base, 3)
        return cls(None, base, env, sh)

    def add_level_adjoint(self, level: int, taps: cubemap.BilinearTaps, adj: np.ndarray):
        self._level_adj[level] += taps.scatter(adj, self._level_adj[level].shape)

    def add_sh_adjoint(self, adj: np.ndarray):
        self._sh_adj += adj

    def add_base_adjoint(self, adj: np.ndarray):
        self._base_adj_direct += adj

    def raw_gradient(self) -> np.ndarray:
        """Collapse accumulated adjoints into d(loss)/d(raw texels)."""
        if self.model is None:
            raise RuntimeError("context was built from radiance only; no raw parameters")
        d_base = self.model.op.adjoint(self._level_adj)
        d_base += (self._sh_adj @ self.model.proj.T).T.reshape(self.base.shape)
        d_base += self._base_adj_direct
        return d_base * self.base  # chain through exp activation
