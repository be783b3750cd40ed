"""Training losses: the baseline image loss (L1 + SSIM), the distillation
progress losses (masked, full-image and per-Gaussian variants), and their
analytic gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .scene import Scene, sigmoid, sigmoid_grad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LAMBDA_SSIM = 0.2


def _kernel() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


_K = _kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur, zero padded; symmetric so it is its own
    adjoint under the same padding."""
    out = correlate1d(img, _K, axis=0, mode="constant")
    return correlate1d(out, _K, axis=1, mode="constant")


def ssim(pred: np.ndarray, gt: np.ndarray):
    """Mean single-scale SSIM over pixels and channels, plus a tape."""
    mu_x = _blur(pred)
    mu_y = _blur(gt)
    m2x = _blur(pred * pred)
    mxy = _blur(pred * gt)
    m2y = _blur(gt * gt)
    var_x = m2x - mu_x * mu_x
    var_y = m2y - mu_y * mu_y
    cov = mxy - mu_x * mu_y
    n1 = 2.0 * mu_x * mu_y + SSIM_C1
    n2 = 2.0 * cov + SSIM_C2
    d1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    d2 = var_x + var_y + SSIM_C2
    s = (n1 * n2) / (d1 * d2)
    tape = dict(
        pred=pred, gt=gt, mu_x=mu_x, mu_y=mu_y, n1=n1, n2=n2, d1=d1, d2=d2, s=s
    )
    return float(s.mean()), tape


def ssim_backward(tape) -> np.ndarray:
    """d(mean SSIM)/d(pred)."""
    s = tape["s"]
    n1, n2, d1, d2 = tape["n1"], tape["n2"], tape["d1"], tape["d2"]
    mu_x, mu_y = tape["mu_x"], tape["mu_y"]
    w = 1.0 / s.size
    dd = 1.0 / (d1 * d2)
    g_m2x = -s / d2  # via var_x
    g_mxy = 2.0 * n1 * dd  # via cov
    g_mux = (
        2.0 * mu_y * n2 * dd  # via n1
        - 2.0 * mu_x * s / d1  # via d1
        - 2.0 * mu_x * g_m2x  # var_x = m2x - mu_x^2
        - mu_y * g_mxy  # cov = mxy - mu_x mu_y
    )
    return w * (
        _blur(g_mux)
        + 2.0 * tape["pred"] * _blur(g_m2x)
        + tape["gt"] * _blur(g_mxy)
    )


def loss_rgb(pred: np.ndarray, gt: np.ndarray):
    """(1 - 0.2) L1 + 0.2 (1 - SSIM), the baseline image loss."""
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    l1 = float(np.abs(pred - gt).mean())
    s, tape = ssim(pred, gt)
    value = (1.0 - LAMBDA_SSIM) * l1 + LAMBDA_SSIM * (1.0 - s)
    tape["l1_sign"] = np.sign(pred - gt)
    return value, tape


def loss_rgb_backward(tape) -> np.ndarray:
    d = (1.0 - LAMBDA_SSIM) * tape["l1_sign"] / tape["l1_sign"].size
    d -= LAMBDA_SSIM * ssim_backward(tape)
    return d


def loss_alpha_masked(alpha_map: np.ndarray, mask: np.ndarray):
    """MSE between the splatted progress map and the object mask."""
    if alpha_map.shape != mask.shape:
        raise ValueError("alpha map and mask shapes differ")
    diff = alpha_map - mask
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def loss_alpha_full(alpha_map: np.ndarray):
    """MSE against 1 everywhere (real-scene refinement)."""
    diff = alpha_map - 1.0
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def loss_alpha_per_gaussian(scene: Scene, domain_sphere=None):
    """Maskless variant: sum |1 - a_i| inside the domain sphere plus
    sum a_i^2 outside; returns (value, d_raw_alpha)."""
    a = sigmoid(scene.gaussians.alpha)
    if domain_sphere is None:
        inside = np.ones(scene.count, dtype=bool)
    else:
        center, radius = domain_sphere
        inside = np.linalg.norm(scene.gaussians.pos - center, axis=1) <= radius
    value = float(np.abs(1.0 - a[inside]).sum() + (a[~inside] ** 2).sum())
    d_act = np.where(inside, -np.sign(1.0 - a), 2.0 * a * (~inside))
    return value, d_act * sigmoid_grad(scene.gaussians.alpha)
