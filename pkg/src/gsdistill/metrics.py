"""Quantitative evaluation: PSNR, SSIM, normal mean angular error."""

from __future__ import annotations

import numpy as np

from .losses import ssim as _ssim

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) for [0, 1] images, capped at 99 dB."""
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    mse = float(((np.asarray(pred) - np.asarray(gt)) ** 2).mean())
    if mse <= 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    value, _ = _ssim(pred, gt)
    return value


def normal_mae(pred_normals: np.ndarray, gt_normals: np.ndarray, mask: np.ndarray) -> float:
    """Mean angular error in degrees over masked pixels."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("normal MAE needs a non-empty mask")
    dots = (pred_normals[mask] * gt_normals[mask]).sum(-1)
    ang = np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))
    return float(ang.mean())
