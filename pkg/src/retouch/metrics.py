"""Reference-based quality metrics on 8-bit sRGB values (0-255 scale)."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import LUMA_WEIGHTS, ImageBuffer

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


class DimensionMismatch(ValueError):
    pass


def _pair(a: ImageBuffer, b: ImageBuffer) -> tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise DimensionMismatch(f"image sizes differ: {a.shape} vs {b.shape}")
    return a.to_srgb8().astype(np.float64), b.to_srgb8().astype(np.float64)


def l1(a: ImageBuffer, b: ImageBuffer) -> float:
    x, y = _pair(a, b)
    return float(np.mean(np.abs(x - y)))


def mse(a: ImageBuffer, b: ImageBuffer) -> float:
    x, y = _pair(a, b)
    return float(np.mean((x - y) ** 2))


def l2(a: ImageBuffer, b: ImageBuffer) -> float:
    """Root-mean-square difference."""
    return math.sqrt(mse(a, b))


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _luma255(x: np.ndarray) -> np.ndarray:
    return x @ LUMA_WEIGHTS


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean SSIM over all fully-covered 11x11 window positions of the luma plane."""
    x, y = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    x, y = _luma255(x), _luma255(y)
    w = gaussian_window()

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, w.shape), w)

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))


def oracle_distance(a: ImageBuffer, b: ImageBuffer) -> float:
    """Ground-truth-aware distance used to label strong/weak pairs (mean L1)."""
    return l1(a, b)


def all_metrics(a: ImageBuffer, b: ImageBuffer) -> dict[str, float]:
    return {"l1": l1(a, b), "l2": l2(a, b), "psnr": psnr(a, b), "ssim": ssim(a, b)}
