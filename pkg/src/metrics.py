"""
Image quality metrics: PSNR and uniform-window SSIM.
"""

import logging
import math
from typing import Optional

import numpy as np
from scipy import ndimage

import config
from src.exceptions import ShapeError, ValidationError

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def _check_pair(a: np.ndarray, b: np.ndarray, op: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: Optional[float] = None) -> float:
    """
    Peak signal-to-noise ratio in dB.

    Args:
        a: Image
        b: Image of the same shape
        peak: Maximum signal value (default 1.0)

    Returns:
        10 log10(peak^2 / MSE), or +inf when the images are identical
    """
    peak = peak or config.PEAK
    a, b = _check_pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def to_gray(image: np.ndarray) -> np.ndarray:
    """Channel mean of a (C, H, W) image; 2D input is returned as is."""
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=0) if image.ndim == 3 else image


def ssim(a: np.ndarray, b: np.ndarray, peak: Optional[float] = None, window: Optional[int] = None) -> float:
    """Mean SSIM over all window x window uniform windows (stride 1) of the grayscale images."""
    peak = peak or config.PEAK
    window = window or config.SSIM_WINDOW
    a, b = _check_pair(a, b, "ssim")
    x, y = to_gray(a), to_gray(b)
    if x.ndim != 2:
        raise ShapeError(f"ssim: expected (C, H, W) or (H, W) images, got {a.shape}")
    if x.shape[0] < window or x.shape[1] < window:
        raise ValidationError(f"ssim: image {x.shape[0]}x{x.shape[1]} smaller than {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    # uniform_filter centers even windows at size // 2; keep only windows fully inside the image
    valid = (slice(window // 2, x.shape[0] - (window - 1) // 2), slice(window // 2, x.shape[1] - (window - 1) // 2))

    def local_mean(image: np.ndarray) -> np.ndarray:
        return ndimage.uniform_filter(image, size=window, mode="constant")[valid]

    mu_x, mu_y = local_mean(x), local_mean(y)
    var_x = local_mean(x * x) - mu_x ** 2
    var_y = local_mean(y * y) - mu_y ** 2
    cov = local_mean(x * y) - mu_x * mu_y
    local = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(local.mean())
