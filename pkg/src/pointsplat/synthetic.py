"""Synthetic-scene workbench: sample a ground-truth Gaussian cloud, build a
camera rig that sees it, and render oracle images and depths so training and
ablations run without any external data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import raster
from .io import SceneDataset
from .scene import Camera, GaussianCloud, quat_to_rot
from .autodiff import Tensor

MIN_VISIBLE_FRACTION = 0.8
RIG_RETRIES = 5


@dataclass
class SyntheticScene:
    """Known ground truth: cloud attributes (constant colors), the rig, and
    the seed that generated everything."""

    mu: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    cameras: list
    seed: int


def _look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)  # world -> camera rows
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ position
    return w2c


def make_arc_rig(n_views: int, size: int, radius: float = 2.5,
                 span_deg: float = 70.0, elev_deg: float = 10.0) -> list:
    """Forward-facing arc of cameras looking at the origin."""
    cams = []
    f = 1.2 * size
    for i in range(n_views):
        frac = i / max(n_views - 1, 1)
        azim = np.deg2rad((frac - 0.5) * span_deg)
        elev = np.deg2rad(elev_deg * np.sin(2.0 * np.pi * frac))
        pos = radius * np.array([np.sin(azim) * np.cos(elev),
                                 np.sin(elev),
                                 -np.cos(azim) * np.cos(elev)])
        w2c = _look_at(pos, np.zeros(3))
        cams.append(Camera(world_to_cam=w2c, fx=f, fy=f, cx=size / 2.0,
                           cy=size / 2.0, width=size, height=size, cam_id=i))
    return cams


def visible_fraction(camera: Camera, points: np.ndarray) -> float:
    _, _, in_view = camera.project(points)
    return float(in_view.mean())


def gen_scene(seed: int, n_gaussians: int = 200, n_views: int = 12,
              n_train: int = 3, size: int = 64, background=(0.0, 0.0, 0.0)):
    """Deterministic synthetic scene plus its rendered dataset.

    Ground-truth Gaussians live in the unit box with anisotropic scales in
    [0.01, 0.1] and opacities in [0.5, 0.99]; images and composited oracle
    depths come from the float64 reference renderer. The initialization
    cloud is the ground-truth centers jittered by N(0, 0.01) with 20% of
    points dropped. Returns (SyntheticScene, SceneDataset).
    """
    if n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    if n_train >= n_views:
        raise ValueError("need at least one held-out view")
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-0.5, 0.5, size=(n_gaussians, 3))
    scales = rng.uniform(0.01, 0.1, size=(n_gaussians, 3))
    quats = rng.normal(size=(n_gaussians, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    color = rng.uniform(0.1, 1.0, size=(n_gaussians, 3))
    opacity = rng.uniform(0.5, 0.99, size=n_gaussians)
    sigma = np.zeros((n_gaussians, 3, 3))
    for i in range(n_gaussians):
        R = quat_to_rot(quats[i])
        sigma[i] = R @ np.diag(scales[i] ** 2) @ R.T

    cams = None
    for attempt in range(RIG_RETRIES):
        radius = 2.5 + 0.3 * attempt
        candidate = make_arc_rig(n_views, size, radius=radius)
        if all(visible_fraction(c, mu) >= MIN_VISIBLE_FRACTION for c in candidate):
            cams = candidate
            break
    if cams is None:
        raise RuntimeError(
            f"could not build a rig seeing >= {MIN_VISIBLE_FRACTION:.0%} of the points")

    bg = np.asarray(background, dtype=np.float64)
    images, depths = [], []
    for cam in cams:
        img, dep, wgt = raster.render_oracle(mu, sigma, color, opacity, cam, background=bg)
        safe = np.where(wgt > 1e-4, wgt, 1.0)
        depths.append(np.where(wgt > 1e-4, dep / safe, 0.0))
        images.append(np.clip(img, 0.0, 1.0))

    train_ids = sorted(set(int(round(v)) for v in np.linspace(0, n_views - 1, n_train)))
    test_ids = [i for i in range(n_views) if i not in train_ids]

    keep = rng.random(n_gaussians) > 0.2
    if not keep.any():
        keep[0] = True
    init_points = mu[keep] + rng.normal(scale=0.01, size=(int(keep.sum()), 3))
    init_colors = color[keep]
    extent = float(np.linalg.norm(init_points.max(axis=0) - init_points.min(axis=0)))

    scene_obj = SyntheticScene(mu=mu, sigma=sigma, color=color,
                               opacity=opacity, cameras=cams, seed=seed)
    dataset = SceneDataset(images=images, depths=depths, cameras=cams,
                           train_ids=train_ids, test_ids=test_ids,
                           init_points=init_points, init_colors=init_colors,
                           extent=extent,
                           meta={"seed": seed, "n_gaussians": n_gaussians,
                                 "image_size": [size, size],
                                 "background": list(bg)})
    return scene_obj, dataset
