"""Image quality metrics on plain arrays."""
from __future__ import annotations

import numpy as np

from . import losses

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr needs matching shapes, got {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity on arrays (no gradients)."""
    return float(losses.ssim(np.asarray(a, dtype=np.float64),
                             np.asarray(b, dtype=np.float64)).data)
