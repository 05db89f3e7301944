"""Multi-scale image features, per-point multi-view sampling, variance fusion.

The encoder is a small trainable substitute for a pretrained pyramid
backbone: per scale (1, 1/2, 1/4) the image is average-pooled to the target
resolution and passed through two 3x3 convolutions with a ReLU between,
producing 8 / 16 / 32 channels (56 total after concatenation).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scene import FEATURE_DIM, Camera

SCALES = (1, 2, 4)
CHANNELS = {1: 8, 2: 16, 4: 32}


# -- differentiable image kernels ------------------------------------------------


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-size 3x3 convolution with zero padding.

    x: (H, W, Cin); w: (3, 3, Cin, Cout); b: (Cout,).
    """
    h, wd, cin = x.shape
    cout = w.shape[3]

    def forward(xd, wd_, bd):
        xp = np.pad(xd, ((1, 1), (1, 1), (0, 0)))
        cols = _shift_stack(xp, h, wd)             # (H, W, 9, Cin)
        wm = wd_.reshape(9 * cin, cout)
        out = cols.reshape(h * wd, 9 * cin) @ wm
        return out.reshape(h, wd, cout) + bd

    def backward(g):
        xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
        cols = _shift_stack(xp, h, wd).reshape(h * wd, 9 * cin)
        gm = g.reshape(h * wd, cout)
        gw = (cols.T @ gm).reshape(3, 3, cin, cout)
        gb = g.sum(axis=(0, 1))
        gcols = (gm @ w.data.reshape(9 * cin, cout).T).reshape(h, wd, 3, 3, cin)
        gxp = np.zeros((h + 2, wd + 2, cin), dtype=g.dtype)
        for di in range(3):
            for dj in range(3):
                gxp[di:di + h, dj:dj + wd] += gcols[:, :, di, dj, :]
        return [gxp[1:-1, 1:-1], gw, gb]

    return ad.custom("conv3x3", [x, w, b], forward, backward)


def _shift_stack(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.stack([xp[di:di + h, dj:dj + w]
                     for di in range(3) for dj in range(3)], axis=2)


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling; H, W must divide by k."""
    if k == 1:
        return x
    h, w, c = x.shape
    if h % k or w % k:
        raise ValueError(f"pooling by {k} needs dims divisible by {k}, got {h}x{w}")

    def forward(xd):
        return xd.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))

    def backward(g):
        g = g / (k * k)
        return [np.repeat(np.repeat(g, k, axis=0), k, axis=1)]

    return ad.custom("avg_pool", [x], forward, backward)


def bilinear_sample(fmap: Tensor, coords: np.ndarray) -> Tensor:
    """Sample a feature map at fractional pixel coordinates.

    fmap: (H, W, C); coords: (P, 2) in the map's own pixel frame where
    (0.5, 0.5) is the center of pixel (0, 0). Coordinates are constants:
    gradients flow into the map only. Border values clamp.
    """
    h, w, c = fmap.shape
    gx = np.clip(np.asarray(coords)[:, 0] - 0.5, 0.0, w - 1.0)
    gy = np.clip(np.asarray(coords)[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(gx).astype(np.int64), 0, w - 1)
    y0 = np.clip(np.floor(gy).astype(np.int64), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy

    def forward(md):
        return (md[y0, x0] * w00 + md[y0, x1] * w01
                + md[y1, x0] * w10 + md[y1, x1] * w11)

    def backward(g):
        gm = np.zeros_like(fmap.data)
        np.add.at(gm, (y0, x0), g * w00)
        np.add.at(gm, (y0, x1), g * w01)
        np.add.at(gm, (y1, x0), g * w10)
        np.add.at(gm, (y1, x1), g * w11)
        return [gm]

    return ad.custom("bilinear_sample", [fmap], forward, backward)


# -- encoder ----------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_weights(rng: np.random.Generator) -> dict:
    """Trainable weights for the three per-scale two-conv encoders."""
    weights = {}
    for s in SCALES:
        c = CHANNELS[s]
        weights[f"s{s}_w1"] = Tensor(kaiming_uniform(rng, (3, 3, 3, c), 27), requires_grad=True)
        weights[f"s{s}_b1"] = Tensor(np.zeros(c), requires_grad=True)
        weights[f"s{s}_w2"] = Tensor(kaiming_uniform(rng, (3, 3, c, c), 9 * c), requires_grad=True)
        weights[f"s{s}_b2"] = Tensor(np.zeros(c), requires_grad=True)
    return weights


def flatten_weights(weights: dict):
    names = sorted(weights)
    return names, [weights[n].data.copy() for n in names]


def unflatten_weights(names, tensors) -> dict:
    return dict(zip(names, tensors))


@dataclass
class FeaturePyramid:
    """Per-view feature maps at scales 1, 1/2, 1/4 (8/16/32 channels)."""

    maps: dict  # scale -> (H/s, W/s, C) Tensor

    def __post_init__(self):
        for s in SCALES:
            if self.maps[s].shape[2] != CHANNELS[s]:
                raise ValueError(
                    f"scale 1/{s} map must have {CHANNELS[s]} channels, got {self.maps[s].shape}")


def build_pyramid(image, weights: dict) -> FeaturePyramid:
    """Encode one image into the three-scale pyramid; differentiable in both
    the image and the encoder weights. H and W must be divisible by 4."""
    image = ad._wrap(image)
    h, w, _ = image.shape
    if h % 4 or w % 4:
        raise ValueError(f"image dims must be divisible by 4, got {h}x{w}")
    maps = {}
    for s in SCALES:
        x = avg_pool(image, s)
        x = ad.relu(conv3x3(x, weights[f"s{s}_w1"], weights[f"s{s}_b1"]))
        maps[s] = conv3x3(x, weights[f"s{s}_w2"], weights[f"s{s}_b2"])
    return FeaturePyramid(maps)


# -- sampling and fusion ------------------------------------------------------------


def sample_points(pyramid: FeaturePyramid, points: np.ndarray, camera: Camera):
    """Sample the pyramid at the projections of world points.

    Returns (features (M, 56) Tensor, in_view (M,) bool). Out-of-view points
    get the zero vector; the projected coordinates are treated as constants.
    """
    uv, _, in_view = camera.project(np.asarray(points, dtype=np.float64))
    uv = np.where(in_view[:, None], uv, 0.5)  # safe placeholder for masked rows
    parts = []
    for s in SCALES:
        sampled = bilinear_sample(pyramid.maps[s], uv / s)
        gate = ad.Tensor(np.broadcast_to(
            in_view[:, None], (len(points), CHANNELS[s])).astype(sampled.dtype).copy())
        parts.append(sampled * gate)
    return ad.concat(parts, axis=1), in_view


def sample_point_feature(pyramid: FeaturePyramid, point: np.ndarray, camera: Camera):
    """Single-point convenience wrapper: returns ((56,) array, flag)."""
    feats, flags = sample_points(pyramid, np.asarray(point)[None, :], camera)
    return feats.data[0], bool(flags[0])


def _masked_stats(samples, flags):
    stack = ad.concat([s.reshape((1,) + s.shape) for s in samples], axis=0)  # (V,M,56)
    v, m, c = stack.shape
    fl = np.stack([np.asarray(f, dtype=bool) for f in flags], axis=0)
    count = fl.sum(axis=0).astype(np.float64)                               # (M,)
    mask = ad.Tensor(np.broadcast_to(fl[:, :, None], (v, m, c)).astype(stack.dtype).copy())
    denom = ad.Tensor(np.broadcast_to(
        np.maximum(count, 1.0)[:, None], (m, c)).astype(stack.dtype).copy())
    gate = ad.Tensor(np.broadcast_to(
        (count > 0)[:, None], (m, c)).astype(stack.dtype).copy())
    return stack, mask, denom, gate


def fuse_variance(samples, flags):
    """Componentwise population variance of the in-view samples per point.

    samples: list of (M, 56) Tensors, one per view; flags: list of (M,) bool.
    Points visible in no view fuse to the zero vector.
    """
    stack, mask, denom, gate = _masked_stats(samples, flags)
    mean = (stack * mask).sum(axis=0) / denom                 # (M, 56)
    dev = (stack - mean) * mask
    var = (dev * dev).sum(axis=0) / denom
    return var * gate


def fuse_mean(samples, flags):
    """Componentwise mean of the in-view samples (the averaging ablation)."""
    stack, mask, denom, gate = _masked_stats(samples, flags)
    mean = (stack * mask).sum(axis=0) / denom
    return mean * gate


FUSION_MODES = {"variance": fuse_variance, "mean": fuse_mean}


def compute_point_features(images, cameras, weights, points, mode: str = "variance"):
    """Full pipeline over all views: pyramids, sampling, fusion.

    Returns (fused (M, 56) Tensor, per-view sample arrays (V, M, 56),
    per-view flags (V, M)). Heavy but run once at startup; train loops use
    the cached result.
    """
    fuse = FUSION_MODES[mode]
    samples, flags = [], []
    for img, cam in zip(images, cameras):
        pyr = build_pyramid(img, weights)
        s, f = sample_points(pyr, points, cam)
        samples.append(s)
        flags.append(f)
    fused = fuse(samples, flags)
    sample_arr = np.stack([s.data for s in samples], axis=0)
    flag_arr = np.stack(flags, axis=0)
    return fused, sample_arr, flag_arr
