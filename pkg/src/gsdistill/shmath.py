"""Real spherical harmonics: basis evaluation, projection, triple product,
cosine-lobe coefficients and the irradiance dot product.

Convention: orthonormal real basis, Condon-Shortley phase omitted (all
leading constants positive).  "Order" counts bands, so order 3 means
l in {0,1,2} with 9 coefficients and order 4 means 16; much of the
literature calls these degree 2 and degree 3.  Linear index i = l^2+l+m.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import cubemap
from .errors import FormatError

SH_C0 = 0.28209479177387814  # 1/(2 sqrt(pi))
SH_C1 = 0.4886025119029199  # sqrt(3/(4 pi))
SH_C2 = (
    1.0925484305920792,
    1.0925484305920792,
    0.31539156525252005,
    1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    0.4570457994644658,
    1.445305721320277,
    0.5900435899266435,
)

# Clamped-cosine lobe band factors after zonal-harmonic rotation to an
# arbitrary axis: rho_i(n) = COS_LOBE_BAND[l(i)] * Y_i(n).
COS_LOBE_BAND = (np.pi, 2.0 * np.pi / 3.0, np.pi / 4.0)

# Analytic projection of max(cos theta, 0) onto the m=0 basis functions.
COS_ZONAL = (
    0.8862269254527580,  # sqrt(pi)/2
    1.0233267079464885,  # sqrt(pi/3)
    0.4954159122098911,  # sqrt(5 pi)/8
)

UNOCCLUDED_DC = 2.0 * np.sqrt(np.pi)  # projection of the constant 1

_BAND_OF_INDEX9 = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])

TENSOR_CACHE_MAGIC = b"SHC1"


def check_unit(vec: np.ndarray, name: str, tol: float = 1e-6) -> None:
    n = np.linalg.norm(np.asarray(vec, dtype=np.float64), axis=-1)
    if not np.all(np.abs(n - 1.0) <= tol):
        raise ValueError(f"{name} must be unit length (|norm-1| <= {tol})")


@dataclass
class SHVector:
    """Coefficient vector over the real SH basis (order 3 or 4)."""

    order: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (self.order * self.order,):
            raise ValueError(
                f"expected {self.order * self.order} coefficients, got {self.coeffs.shape}"
            )


def eval_sh_basis(dirs: np.ndarray, order: int) -> np.ndarray:
    """Evaluate the basis at unit directions; returns (..., order^2).

    Raises for non-unit input or orders outside {3, 4}.
    """
    if order not in (3, 4):
        raise ValueError("order must be 3 or 4")
    d = np.asarray(dirs, dtype=np.float64)
    check_unit(d, "dir")
    return _basis_unchecked(d, order)


def _basis_unchecked(d: np.ndarray, order: int) -> np.ndarray:
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (order * order,))
    out[..., 0] = SH_C0
    out[..., 1] = SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = SH_C1 * x
    xx, yy, zz = x * x, y * y, z * z
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (xx - yy)
    if order == 4:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh_basis_jacobian(d: np.ndarray) -> np.ndarray:
    """Partials of the 9 order-3 basis polynomials w.r.t. (x, y, z).

    Treats the components as free variables; callers chain through their
    own normalization.  Returns (..., 9, 3).
    """
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    jac = np.zeros(d.shape[:-1] + (9, 3))
    jac[..., 1, 1] = SH_C1
    jac[..., 2, 2] = SH_C1
    jac[..., 3, 0] = SH_C1
    jac[..., 4, 0] = SH_C2[0] * y
    jac[..., 4, 1] = SH_C2[0] * x
    jac[..., 5, 1] = SH_C2[1] * z
    jac[..., 5, 2] = SH_C2[1] * y
    jac[..., 6, 0] = SH_C2[2] * (-2.0 * x)
    jac[..., 6, 1] = SH_C2[2] * (-2.0 * y)
    jac[..., 6, 2] = SH_C2[2] * 4.0 * z
    jac[..., 7, 0] = SH_C2[3] * z
    jac[..., 7, 2] = SH_C2[3] * x
    jac[..., 8, 0] = SH_C2[4] * 2.0 * x
    jac[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    return jac


def uniform_sphere_dirs(n: int, seed: int = 0) -> np.ndarray:
    """n deterministic uniformly distributed unit directions."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def sphere_quadrature(n_theta: int = 64, n_phi: int = 128):
    """Gauss-Legendre x uniform-phi product rule; exact for low-degree
    polynomials restricted to the sphere.  Returns (dirs, weights)."""
    mu, wmu = np.polynomial.legendre.leggauss(n_theta)
    phi = (np.arange(n_phi) + 0.5) * 2.0 * np.pi / n_phi
    s = np.sqrt(1.0 - mu * mu)
    dirs = np.stack(
        [
            np.outer(s, np.cos(phi)),
            np.outer(s, np.sin(phi)),
            np.outer(mu, np.ones(n_phi)),
        ],
        axis=-1,
    ).reshape(-1, 3)
    w = np.outer(wmu, np.full(n_phi, 2.0 * np.pi / n_phi)).reshape(-1)
    return dirs, w


@dataclass
class TripleProductTensor:
    """Sparse symmetric tensor C_ijk = integral of Y_i Y_j Y_k."""

    order: int
    i: np.ndarray
    j: np.ndarray
    k: np.ndarray
    value: np.ndarray

    @property
    def entries(self):
        return list(zip(self.i, self.j, self.k, self.value))

    def contract_right(self, v: np.ndarray) -> np.ndarray:
        """Matrix A with A[i, j] = sum_k C_ijk v[k] for coefficient v."""
        n = self.order * self.order
        a = np.zeros((n, n))
        np.add.at(a, (self.i, self.j), self.value * v[self.k])
        return a


def build_triple_product_tensor(order: int = 3) -> TripleProductTensor:
    """Tabulate the nonzero C_ijk by spherical product quadrature.

    The integrand is a polynomial of total degree <= 6, which the
    Gauss-Legendre x uniform-phi rule integrates exactly; entries below
    1e-12 are dropped as true zeros.
    """
    if order != 3:
        raise ValueError("triple product tensor is only built for order 3")
    dirs, w = sphere_quadrature(64, 128)
    basis = _basis_unchecked(dirs, order)  # (M, 9)
    n = order * order
    ii, jj, kk, vals = [], [], [], []
    weighted = basis * w[:, None]
    for i in range(n):
        prod_i = weighted * basis[:, i : i + 1]
        mat = prod_i.T @ basis  # (9, 9) of integrals Y_i Y_j Y_k
        for j in range(n):
            for k in range(n):
                v = mat[j, k]
                if abs(v) >= 1e-12:
                    ii.append(i)
                    jj.append(j)
                    kk.append(k)
                    vals.append(v)
    return TripleProductTensor(
        order,
        np.array(ii, dtype=np.int64),
        np.array(jj, dtype=np.int64),
        np.array(kk, dtype=np.int64),
        np.array(vals),
    )


def save_triple_product_tensor(tensor: TripleProductTensor, path) -> None:
    """Binary cache: magic 'SHC1', order u32, then (u16,u16,u16,f64) records."""
    with open(path, "wb") as fh:
        fh.write(TENSOR_CACHE_MAGIC)
        fh.write(struct.pack("<I", tensor.order))
        for i, j, k, v in zip(tensor.i, tensor.j, tensor.k, tensor.value):
            fh.write(struct.pack("<HHHd", i, j, k, v))


def load_triple_product_tensor(path) -> TripleProductTensor:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TENSOR_CACHE_MAGIC:
        raise FormatError("bad triple-product cache magic", offset=0)
    (order,) = struct.unpack_from("<I", data, 4)
    rec = struct.calcsize("<HHHd")
    body = data[8:]
    if len(body) % rec != 0:
        raise FormatError("truncated triple-product cache", offset=8 + len(body))
    m = len(body) // rec
    i = np.empty(m, dtype=np.int64)
    j = np.empty(m, dtype=np.int64)
    k = np.empty(m, dtype=np.int64)
    v = np.empty(m)
    for r in range(m):
        i[r], j[r], k[r], v[r] = struct.unpack_from("<HHHd", body, r * rec)
    return TripleProductTensor(order, i, j, k, v)


_TENSOR_CACHE: dict[int, TripleProductTensor] = {}


def triple_product_tensor(order: int = 3) -> TripleProductTensor:
    """Process-wide cached tensor (building it is cheap but not free)."""
    if order not in _TENSOR_CACHE:
        _TENSOR_CACHE[order] = build_triple_product_tensor(order)
    return _TENSOR_CACHE[order]


def sh_triple_product(
    light: SHVector, vis: SHVector, tensor: TripleProductTensor
) -> SHVector:
    """Project the pointwise product of two band-limited functions back
    onto the basis: p_i = sum_jk C_ijk l_j v_k."""
    if not (light.order == vis.order == tensor.order):
        raise ValueError("triple product operands must share the same order")
    p = np.zeros_like(light.coeffs)
    np.add.at(
        p, tensor.i, tensor.value * light.coeffs[tensor.j] * vis.coeffs[tensor.k]
    )
    return SHVector(light.order, p)


def sh_dot(a: SHVector, b: SHVector) -> float:
    if a.order != b.order:
        raise ValueError("sh_dot operands must share the same order")
    return float(np.dot(a.coeffs, b.coeffs))


def cosine_lobe_coeffs(normals: np.ndarray) -> np.ndarray:
    """Order-3 coefficients of max(0, n . w) for unit normals (..., 3)."""
    basis = _basis_unchecked(np.asarray(normals, dtype=np.float64), 3)
    return basis * np.asarray(COS_LOBE_BAND)[_BAND_OF_INDEX9]


def cosine_lobe_sh(normal: np.ndarray) -> SHVector:
    """Single-normal wrapper validating unit length."""
    check_unit(normal, "normal")
    return SHVector(3, cosine_lobe_coeffs(normal))


def cosine_lobe_jacobian(normals: np.ndarray) -> np.ndarray:
    """d(cosine lobe coeffs)/d(normal components): (..., 9, 3)."""
    jac = eval_sh_basis_jacobian(normals)
    return jac * np.asarray(COS_LOBE_BAND)[_BAND_OF_INDEX9][:, None]


def unoccluded_sh() -> SHVector:
    """Projection of the constant function 1 (no occlusion anywhere)."""
    c = np.zeros(9)
    c[0] = UNOCCLUDED_DC
    return SHVector(3, c)


def project_cubemap_to_sh(faces: np.ndarray, order: int) -> np.ndarray:
    """Project (6, R, R, C) texel values onto the basis with exact
    per-texel solid angle weights; returns (C, order^2)."""
    faces = np.asarray(faces, dtype=np.float64)
    if faces.ndim == 3:
        faces = faces[..., None]
    if not np.all(np.isfinite(faces)):
        raise ValueError("cubemap contains NaN or Inf texels")
    res = faces.shape[1]
    basis = eval_sh_basis(cubemap.all_dirs(res), order)  # (6, R, R, n)
    w = cubemap.texel_solid_angles(res)  # (R, R)
    weighted = (faces * w[None, :, :, None]).reshape(-1, faces.shape[-1])
    return weighted.T @ basis.reshape(-1, order * order)


def projection_matrix(res: int, order: int) -> np.ndarray:
    """(6*R*R, order^2) linear operator mapping texels to coefficients."""
    basis = eval_sh_basis(cubemap.all_dirs(res), order)
    w = cubemap.texel_solid_angles(res)
    return (basis * w[None, :, :, None]).reshape(-1, order * order)
