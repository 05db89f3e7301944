"""The four-term training loss: weighted L1 + SSIM color term, masked depth
L1 against the prior, and an edge-aware first/second-order depth smoothness
regularizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = (0.299, 0.587, 0.114)


@dataclass
class LossWeights:
    """Loss combination weights; lambda1/lambda2 blend L1 with (1 - SSIM),
    lambda3/lambda4 scale the depth and smoothness terms, alpha1/alpha2 are
    the edge-awareness temperatures."""

    lambda1: float = 0.8
    lambda2: float = 0.2
    lambda3: float = 0.05
    lambda4: float = 0.067
    alpha1: float = 0.5
    alpha2: float = 0.5

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def filter2d(x: Tensor, kernel: np.ndarray) -> Tensor:
    """Same-size zero-padded correlation with a fixed spatial kernel,
    applied to each channel independently. x: (H, W, C)."""
    k = kernel.shape[0]
    pad = k // 2
    h, w, _ = x.shape

    def forward(xd):
        xp = np.pad(xd, ((pad, pad), (pad, pad), (0, 0)))
        out = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                out += kernel[i, j] * xp[i:i + h, j:j + w]
        return out

    def backward(g):
        gp = np.pad(np.zeros_like(x.data), ((pad, pad), (pad, pad), (0, 0)))
        for i in range(k):
            for j in range(k):
                gp[i:i + h, j:j + w] += kernel[i, j] * g
        return [gp[pad:-pad, pad:-pad]]

    return ad.custom("filter2d", [x], forward, backward)


def ssim(a, b, window: np.ndarray | None = None):
    """Mean structural similarity over an (H, W, C) pair in [0, 1].

    11x11 Gaussian window, sigma 1.5, zero-padded borders. Returns a scalar
    Tensor; symmetric in its arguments and exactly 1 for identical inputs.
    """
    a = ad._wrap(a)
    b = ad._wrap(b, a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"ssim needs matching shapes, got {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a.reshape(a.shape + (1,))
        b = b.reshape(b.shape + (1,))
    win = gaussian_window() if window is None else window

    mu_a = filter2d(a, win)
    mu_b = filter2d(b, win)
    s_aa = filter2d(a * a, win) - mu_a * mu_a
    s_bb = filter2d(b * b, win) - mu_b * mu_b
    s_ab = filter2d(a * b, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * s_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return (num / den).mean()


def loss_color(render, gt, weights: LossWeights | None = None):
    """lambda1 * mean|render - gt| + lambda2 * (1 - SSIM(render, gt))."""
    w = weights or LossWeights()
    render = ad._wrap(render)
    gt = ad._wrap(gt, render.dtype)
    if render.shape != gt.shape:
        raise ValueError(f"shape mismatch: render {render.shape} vs gt {gt.shape}")
    l1 = ad.absolute(render - gt).mean()
    return w.lambda1 * l1 + w.lambda2 * (1.0 - ssim(render, gt))


def loss_depth(rendered_depth, weight_map, prior_depth, weight_threshold: float = 0.5):
    """Masked L1 between the weight-normalized rendered depth and the prior.

    Only pixels whose accumulated splat weight exceeds the threshold count;
    the mask and the prior are constants. Returns 0 when nothing qualifies.
    """
    d = ad._wrap(rendered_depth)
    w = ad._wrap(weight_map, d.dtype)
    if d.shape != w.shape or d.shape != tuple(np.asarray(prior_depth).shape):
        raise ValueError(
            f"shape mismatch: depth {d.shape}, weight {w.shape}, prior {np.asarray(prior_depth).shape}")
    mask = (np.asarray(w.data) > weight_threshold)
    n = int(mask.sum())
    if n == 0:
        return ad.Tensor(0.0)
    mask_t = Tensor(mask.astype(d.dtype))
    prior_t = Tensor(np.asarray(prior_depth, dtype=d.dtype))
    safe_w = w * mask_t + (1.0 - mask_t)  # avoid 0/0 on masked-out pixels
    err = ad.absolute(d / safe_w - prior_t) * mask_t
    return err.sum() * (1.0 / n)


def _luminance(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return LUMA[0] * img[:, :, 0] + LUMA[1] * img[:, :, 1] + LUMA[2] * img[:, :, 2]


def loss_smooth(rendered_depth, gt_image, alpha1: float = 0.5, alpha2: float = 0.5):
    """Edge-aware depth smoothness: exp(-a1 |grad I|) |grad D| on forward
    differences plus exp(-a2 |lap I|) |lap D| on the 4-neighbor Laplacian,
    each meaned over its valid region. The image enters as luminance and is
    constant."""
    d = ad._wrap(rendered_depth)
    lum = _luminance(gt_image)
    if d.shape != lum.shape:
        raise ValueError(f"shape mismatch: depth {d.shape} vs image {lum.shape}")
    h, w = d.shape

    gx_i = np.abs(lum[:, 1:] - lum[:, :-1])[:h - 1, :]
    gy_i = np.abs(lum[1:, :] - lum[:-1, :])[:, :w - 1]
    w1 = np.exp(-alpha1 * (gx_i + gy_i)).astype(d.dtype)

    dx = ad.absolute(d[:, 1:] - d[:, :-1])[:h - 1, :]
    dy = ad.absolute(d[1:, :] - d[:-1, :])[:, :w - 1]
    term1 = ((dx + dy) * Tensor(w1)).mean()

    lap_i = np.abs(lum[2:, 1:-1] + lum[:-2, 1:-1] + lum[1:-1, 2:] + lum[1:-1, :-2]
                   - 4.0 * lum[1:-1, 1:-1])
    w2 = np.exp(-alpha2 * lap_i).astype(d.dtype)
    lap_d = (d[2:, 1:-1] + d[:-2, 1:-1] + d[1:-1, 2:] + d[1:-1, :-2]
             - 4.0 * d[1:-1, 1:-1])
    term2 = (ad.absolute(lap_d) * Tensor(w2)).mean()
    return term1 + term2


def loss_total(color_term, depth_term, smooth_term, weights: LossWeights | None = None):
    """color + lambda3 * depth + lambda4 * smooth (color is pre-weighted)."""
    w = weights or LossWeights()
    return color_term + w.lambda3 * depth_term + w.lambda4 * smooth_term
