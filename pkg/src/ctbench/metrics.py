"""PSNR and SSIM against a reference image."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ctbench.errors import DataError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise DataError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def dynamic_range(ref) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    return float(ref.max() - ref.min())


def psnr(x, ref) -> float:
    """``10 log10(R^2 / MSE)`` with ``R`` the reference's max minus min.

    Returns ``inf`` for identical images.
    """
    x, ref = _pair(x, ref)
    R = dynamic_range(ref)
    if R == 0:
        raise DataError("reference image is constant")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(R * R / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(x, ref, data_range: float | None = None, window: int = SSIM_WINDOW,
             sigma: float = SSIM_SIGMA, k1: float = SSIM_K1, k2: float = SSIM_K2) -> np.ndarray:
    """Local SSIM for every fully contained ``window x window`` position."""
    x, ref = _pair(x, ref)
    if x.ndim != 2 or min(x.shape) < window:
        raise DataError(f"images of shape {x.shape} are smaller than the {window}x{window} window")
    R = dynamic_range(ref) if data_range is None else float(data_range)
    if R <= 0:
        raise DataError("reference image is constant")
    w = gaussian_window(window, sigma)
    c = window // 2
    crop = (slice(c, x.shape[0] - (window - 1 - c)), slice(c, x.shape[1] - (window - 1 - c)))

    def filt(a):
        return ndimage.correlate(a, w, mode="constant")[crop]

    mu_x, mu_y = filt(x), filt(ref)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(ref * ref) - mu_y * mu_y
    sxy = filt(x * ref) - mu_x * mu_y
    C1, C2 = (k1 * R) ** 2, (k2 * R) ** 2
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x * mu_x + mu_y * mu_y + C1) * (sxx + syy + C2)
    return num / den


def ssim(x, ref, **kwargs) -> float:
    """Mean structural similarity over all valid Gaussian windows
    (11x11, sigma 1.5, K1 0.01, K2 0.03, range from ``ref``)."""
    return float(np.mean(ssim_map(x, ref, **kwargs)))


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    data_range: float
    window: int = SSIM_WINDOW

    @property
    def identical(self) -> bool:
        return math.isinf(self.psnr)


def quality_report(x, ref) -> QualityReport:
    return QualityReport(psnr(x, ref), ssim(x, ref), dynamic_range(ref), SSIM_WINDOW)
