"""Cook-Torrance microfacet terms and the split-sum integration table.

Roughness parameterization: a = r^2 for the GGX distribution and
k = r^4 / 2 = a^2 / 2 for the Smith geometric term (the image-based
lighting variant).  The dielectric base reflectance is fixed at 0.04.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

A_MIN = 1e-3  # floor on a = r^2; keeps the NDF and its gradients finite
DIELECTRIC_F0 = 0.04
LUT_MAGIC = b"BLUT"


@dataclass
class MicrofacetParams:
    """Material sample: roughness, metallic, albedo plus derived scalars."""

    roughness: float
    metallic: float
    albedo: np.ndarray

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    @property
    def a(self) -> float:
        return max(self.roughness * self.roughness, A_MIN)

    @property
    def k(self) -> float:
        return 0.5 * self.a * self.a

    @property
    def f0(self) -> np.ndarray:
        return self.metallic * self.albedo + (1.0 - self.metallic) * DIELECTRIC_F0


def ggx_D(n_dot_h, a):
    """GGX normal distribution; a below A_MIN is clamped, not an error."""
    a = np.maximum(a, A_MIN)
    nh = np.clip(n_dot_h, 0.0, 1.0)
    a2 = a * a
    denom = nh * nh * (a2 - 1.0) + 1.0
    return a2 / (np.pi * denom * denom)


def smith_G(n_dot_v, n_dot_l, k):
    """Product of the two Smith sub-terms; zero dots yield zero."""

    def sub(c):
        return c / (c * (1.0 - k) + k)

    return sub(np.clip(n_dot_v, 0.0, 1.0)) * sub(np.clip(n_dot_l, 0.0, 1.0))


def fresnel_schlick(h_dot_v, f0):
    """Channelwise F0 + (1 - F0)(1 - h.v)^5."""
    f0 = np.asarray(f0, dtype=np.float64)
    fc = np.asarray((1.0 - np.clip(h_dot_v, 0.0, 1.0)) ** 5, dtype=np.float64)
    if f0.ndim > fc.ndim:
        fc = fc[..., None]
    return f0 + (1.0 - f0) * fc


def eval_microfacet_brdf(wi, wo, n, p: MicrofacetParams) -> np.ndarray:
    """Full specular BRDF value; zero below the horizon."""
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    n_dot_l = float(np.dot(n, wi))
    n_dot_v = float(np.dot(n, wo))
    if n_dot_l <= 0.0 or n_dot_v <= 0.0:
        return np.zeros(3)
    h = wi + wo
    h = h / np.linalg.norm(h)
    n_dot_h = float(np.dot(n, h))
    h_dot_v = float(np.dot(h, wo))
    d = ggx_D(n_dot_h, p.a)
    g = smith_G(n_dot_v, n_dot_l, p.k)
    f = fresnel_schlick(h_dot_v, p.f0)
    return d * g * f / (4.0 * n_dot_v * n_dot_l)


def eval_microfacet_brdf_grads(wi, wo, n, p: MicrofacetParams):
    """BRDF value plus analytic partials w.r.t. (r, m, albedo channels).

    Returns (value, d_dr, d_dm, d_dc) with d_dc the per-channel diagonal.
    """
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    n_dot_l = float(np.dot(n, wi))
    n_dot_v = float(np.dot(n, wo))
    zeros = np.zeros(3)
    if n_dot_l <= 0.0 or n_dot_v <= 0.0:
        return zeros, zeros, zeros, zeros
    h = wi + wo
    h = h / np.linalg.norm(h)
    nh = float(np.dot(n, h))
    hv = float(np.dot(h, wo))
    r, m, c = p.roughness, p.metallic, p.albedo
    a = max(r * r, A_MIN)
    k = 0.5 * a * a
    da_dr = 2.0 * r if r * r > A_MIN else 0.0
    dk_dr = a * da_dr  # k = a^2/2

    nh2 = np.clip(nh, 0.0, 1.0) ** 2
    denom = nh2 * (a * a - 1.0) + 1.0
    d_val = a * a / (np.pi * denom * denom)
    dd_da = (2.0 * a * denom - 4.0 * a**3 * nh2) / (np.pi * denom**3)

    def sub(cv):
        return cv / (cv * (1.0 - k) + k)

    def dsub_dk(cv):
        den = cv * (1.0 - k) + k
        return -cv * (1.0 - cv) / (den * den)

    g_val = sub(n_dot_v) * sub(n_dot_l)
    dg_dk = dsub_dk(n_dot_v) * sub(n_dot_l) + sub(n_dot_v) * dsub_dk(n_dot_l)

    fc = (1.0 - np.clip(hv, 0.0, 1.0)) ** 5
    f0 = m * c + (1.0 - m) * DIELECTRIC_F0
    f_val = f0 + (1.0 - f0) * fc
    df_df0 = 1.0 - fc
    df0_dm = c - DIELECTRIC_F0
    df0_dc = m

    scale = 1.0 / (4.0 * n_dot_v * n_dot_l)
    value = d_val * g_val * f_val * scale
    d_dr = (dd_da * da_dr * g_val + d_val * dg_dk * dk_dr) * f_val * scale
    d_dm = d_val * g_val * df_df0 * df0_dm * scale
    d_dc = d_val * g_val * df_df0 * df0_dc * scale * np.ones(3)
    return value, d_dr, d_dm, d_dc


def hammersley(n: int) -> np.ndarray:
    """First n points of the (i/n, radical-inverse base 2) sequence."""
    i = np.arange(n, dtype=np.uint32)
    bits = i.copy()
    bits = (bits << np.uint32(16)) | (bits >> np.uint32(16))
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | (
        (bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1)
    )
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | (
        (bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2)
    )
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | (
        (bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4)
    )
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | (
        (bits & np.uint32(0xFF00FF00)) >> np.uint32(8)
    )
    return np.stack([i / n, bits.astype(np.float64) * 2.3283064365386963e-10], axis=-1)


def ggx_sample_h(xi: np.ndarray, a: float) -> np.ndarray:
    """Importance-sample half vectors around +z for GGX with width a."""
    a = max(a, A_MIN)
    phi = 2.0 * np.pi * xi[:, 0]
    cos_t = np.sqrt((1.0 - xi[:, 1]) / (1.0 + (a * a - 1.0) * xi[:, 1]))
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    return np.stack([np.cos(phi) * sin_t, np.sin(phi) * sin_t, cos_t], axis=-1)


def tangent_frame(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Any orthonormal (tangent, bitangent) pair for unit normals (..., 3)."""
    n = np.asarray(n, dtype=np.float64)
    up = np.where(
        (np.abs(n[..., 2]) < 0.999)[..., None],
        np.array([0.0, 0.0, 1.0]),
        np.array([1.0, 0.0, 0.0]),
    )
    t = np.cross(up, n)
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(n, t)
    return t, b


@dataclass
class BrdfLut:
    """Split-sum environment-BRDF table over (n.v, roughness) in [0,1]^2.

    Entries sit on an N x N node grid including both endpoints; lookup is
    bilinear.  specular ~= prefiltered_light * (F0 * scale + bias).
    """

    n: int
    scale: np.ndarray = field(repr=False)
    bias: np.ndarray = field(repr=False)

    def lookup(self, n_dot_v, roughness):
        u = np.clip(np.asarray(n_dot_v, dtype=np.float64), 0.0, 1.0) * (self.n - 1)
        v = np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0) * (self.n - 1)
        u0 = np.minimum(u.astype(np.int64), self.n - 2)
        v0 = np.minimum(v.astype(np.int64), self.n - 2)
        fu = u - u0
        fv = v - v0
        out = []
        for tab in (self.scale, self.bias):
            s = (
                tab[v0, u0] * (1 - fu) * (1 - fv)
                + tab[v0, u0 + 1] * fu * (1 - fv)
                + tab[v0 + 1, u0] * (1 - fu) * fv
                + tab[v0 + 1, u0 + 1] * fu * fv
            )
            out.append(s)
        return out[0], out[1]

    def lookup_with_grads(self, n_dot_v, roughness):
        """(scale, bias, dscale/d(nv), dbias/d(nv), dscale/dr, dbias/dr)."""
        nv = np.asarray(n_dot_v, dtype=np.float64)
        r = np.asarray(roughness, dtype=np.float64)
        u_raw = nv * (self.n - 1)
        v_raw = r * (self.n - 1)
        u = np.clip(u_raw, 0.0, self.n - 1)
        v = np.clip(v_raw, 0.0, self.n - 1)
        u_free = (u_raw > 0.0) & (u_raw < self.n - 1)
        v_free = (v_raw > 0.0) & (v_raw < self.n - 1)
        u0 = np.minimum(u.astype(np.int64), self.n - 2)
        v0 = np.minimum(v.astype(np.int64), self.n - 2)
        fu = u - u0
        fv = v - v0
        vals, dus, dvs = [], [], []
        for tab in (self.scale, self.bias):
            t00 = tab[v0, u0]
            t01 = tab[v0, u0 + 1]
            t10 = tab[v0 + 1, u0]
            t11 = tab[v0 + 1, u0 + 1]
            vals.append(
                t00 * (1 - fu) * (1 - fv)
                + t01 * fu * (1 - fv)
                + t10 * (1 - fu) * fv
                + t11 * fu * fv
            )
            dus.append(((t01 - t00) * (1 - fv) + (t11 - t10) * fv) * (self.n - 1) * u_free)
            dvs.append(((t10 - t00) * (1 - fu) + (t11 - t01) * fu) * (self.n - 1) * v_free)
        return vals[0], vals[1], dus[0], dus[1], dvs[0], dvs[1]


def integrate_brdf(n_dot_v: float, roughness: float, samples: int) -> tuple[float, float]:
    """Split-sum (scale, bias) for one grid point via GGX importance sampling."""
    nv = max(float(n_dot_v), 1e-4)
    v = np.array([np.sqrt(max(0.0, 1.0 - nv * nv)), 0.0, nv])
    n = np.array([0.0, 0.0, 1.0])
    a = max(roughness * roughness, A_MIN)
    k = 0.5 * a * a
    h = ggx_sample_h(hammersley(samples), a)
    l = 2.0 * (h @ v)[:, None] * h - v
    n_dot_l = l[:, 2]
    n_dot_h = np.maximum(h[:, 2], 0.0)
    v_dot_h = np.maximum(h @ v, 0.0)
    good = n_dot_l > 0.0
    g = smith_G(nv, np.maximum(n_dot_l, 0.0), k)
    g_vis = np.where(good, g * v_dot_h / np.maximum(n_dot_h * nv, 1e-8), 0.0)
    fc = (1.0 - v_dot_h) ** 5
    scale = float(((1.0 - fc) * g_vis).mean())
    bias = float((fc * g_vis).mean())
    return scale, bias


def build_brdf_lut(n: int = 64, samples: int = 1024) -> BrdfLut:
    """Tabulate the split-sum pair on an n x n node grid.

    The raw integration can exceed unity at grazing view angles because the
    Schlick-GGX k = r^4/2 under-shadows there; entries are clamped so that
    scale + bias <= 1, restoring the split-sum energy bound.  The clamp is
    inactive away from grazing (n.v >= ~0.25).
    """
    if n < 32:
        raise ValueError("LUT resolution must be at least 32")
    if samples < 256:
        raise ValueError("need at least 256 importance samples per entry")
    scale = np.zeros((n, n))
    bias = np.zeros((n, n))
    for iv in range(n):
        r = iv / (n - 1)
        for iu in range(n):
            u = iu / (n - 1)
            scale[iv, iu], bias[iv, iu] = integrate_brdf(u, r, samples)
    bias = np.clip(bias, 0.0, 1.0)
    scale = np.clip(scale, 0.0, 1.0 - bias)
    return BrdfLut(n, scale, bias)


def save_brdf_lut(lut: BrdfLut, path) -> None:
    """Binary cache: magic 'BLUT', N u32, then N^2 (f32 scale, f32 bias)."""
    with open(path, "wb") as fh:
        fh.write(LUT_MAGIC)
        fh.write(struct.pack("<I", lut.n))
        inter = np.empty((lut.n, lut.n, 2), dtype="<f4")
        inter[..., 0] = lut.scale
        inter[..., 1] = lut.bias
        fh.write(inter.tobytes())


def load_brdf_lut(path) -> BrdfLut:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != LUT_MAGIC:
        raise FormatError("bad BRDF LUT magic", offset=0)
    (n,) = struct.unpack_from("<I", data, 4)
    need = 8 + n * n * 8
    if len(data) < need:
        raise FormatError("truncated BRDF LUT", offset=len(data))
    inter = np.frombuffer(data[8:need], dtype="<f4").reshape(n, n, 2)
    return BrdfLut(n, inter[..., 0].astype(np.float64), inter[..., 1].astype(np.float64))


_LUT_CACHE: dict[tuple[int, int], BrdfLut] = {}


def default_brdf_lut(n: int = 64, samples: int = 1024) -> BrdfLut:
    key = (n, samples)
    if key not in _LUT_CACHE:
        _LUT_CACHE[key] = build_brdf_lut(n, samples)
    return _LUT_CACHE[key]
