"""Domain types for Gaussian clouds and cameras, covariance assembly, and
spherical-harmonics color evaluation (the ablation color path)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FEATURE_DIM = 56
NEAR_PLANE = 0.01

# Real SH basis constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.4453057213202769,
         -0.5900435899266435)


@dataclass
class GaussianCloud:
    """M Gaussians: world centers plus pre-activation attributes.

    In the learned-feature mode ``feat`` is the trainable per-point feature
    and ``raw_scale`` / ``raw_quat`` hold the most recent decoded values
    (cached for densification decisions). In the SH ablation mode the raw
    attributes and ``sh`` / ``raw_opacity`` are the trainable leaves.
    """

    mu: Tensor
    raw_scale: Tensor | None = None
    raw_quat: Tensor | None = None
    feat: Tensor | None = None
    feat_enh: np.ndarray | None = None
    sh: Tensor | None = None
    raw_opacity: Tensor | None = None

    def __post_init__(self):
        if self.mu.ndim != 2 or self.mu.shape[1] != 3:
            raise ValueError(f"mu must be (M, 3), got {self.mu.shape}")
        if self.feat is not None and self.feat.shape != (len(self), FEATURE_DIM):
            raise ValueError(
                f"feat must be (M, {FEATURE_DIM}), got {self.feat.shape}"
            )

    def __len__(self) -> int:
        return self.mu.shape[0]


@dataclass
class Camera:
    """Pinhole camera: rigid world-to-camera transform plus intrinsics.

    Pixel (ix, iy) has its center at (ix + 0.5, iy + 0.5) in the coordinate
    frame of (cx, cy).
    """

    world_to_cam: np.ndarray  # (4, 4)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_id: int = 0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        if self.world_to_cam.shape != (4, 4):
            raise ValueError(f"world_to_cam must be 4x4, got {self.world_to_cam.shape}")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-4):
            raise ValueError(f"camera {self.cam_id}: rotation block is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValueError(f"camera {self.cam_id}: rotation has det < 0 (reflection)")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def view_dir(self) -> np.ndarray:
        """Unit optical-axis direction from the camera toward the scene."""
        d = self.rotation[2, :]
        return d / np.linalg.norm(d)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Project world points; returns (uv pixel coords, camera z, in_view)."""
        t = self.to_camera(points)
        z = t[:, 2]
        safe_z = np.where(z > NEAR_PLANE, z, 1.0)
        u = self.fx * t[:, 0] / safe_z + self.cx
        v = self.fy * t[:, 1] / safe_z + self.cy
        in_view = (z > NEAR_PLANE) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        return np.stack([u, v], axis=1), z, in_view

    def point_dirs(self, points: np.ndarray) -> np.ndarray:
        """Per-point unit view directions from the camera center."""
        d = points - self.center[None, :]
        n = np.linalg.norm(d, axis=1, keepdims=True)
        return d / np.maximum(n, 1e-12)


# -- covariance assembly -------------------------------------------------------


def quat_to_rot(raw_quat) -> np.ndarray:
    """Rotation matrix from an unnormalized (w, x, y, z) quaternion."""
    q = np.asarray(raw_quat, dtype=np.float64)
    n = np.linalg.norm(q)
    if n <= 1e-12:
        raise ValueError("cannot normalize a zero-norm quaternion")
    w, x, y, z = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def normalize_quat(raw_quat: Tensor, eps_w: float = 0.0) -> Tensor:
    """Differentiable batched quaternion normalization, (M, 4) -> (M, 4).

    eps_w > 0 adds a small constant to the scalar part before normalizing,
    guarding the all-zeros corner produced by a fresh decoder.
    """
    w = raw_quat[:, 0] + eps_w if eps_w else raw_quat[:, 0]
    x, y, z = raw_quat[:, 1], raw_quat[:, 2], raw_quat[:, 3]
    n = ad.sqrt(w * w + x * x + y * y + z * z)
    if eps_w == 0.0 and np.any(n.data <= 1e-12):
        raise ValueError("cannot normalize a zero-norm quaternion")
    return ad.stack_cols([w / n, x / n, y / n, z / n])


def rotation_cols(quat: Tensor):
    """The nine rotation-matrix entries as (M,) tensors, row-major.

    quat must already be unit norm.
    """
    w, x, y, z = quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3]
    two = 2.0
    r00 = 1.0 - two * (y * y + z * z)
    r01 = two * (x * y - w * z)
    r02 = two * (x * z + w * y)
    r10 = two * (x * y + w * z)
    r11 = 1.0 - two * (x * x + z * z)
    r12 = two * (y * z - w * x)
    r20 = two * (x * z - w * y)
    r21 = two * (y * z + w * x)
    r22 = 1.0 - two * (x * x + y * y)
    return [[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]]


def covariance_from_activated(scale: Tensor, quat: Tensor) -> Tensor:
    """Sigma = R diag(scale)^2 R^T for activated scales and unit quaternions.

    Batched and differentiable: scale (M, 3), quat (M, 4) -> (M, 3, 3).
    """
    R = rotation_cols(quat)
    s2 = [scale[:, k] * scale[:, k] for k in range(3)]
    entries = {}
    for a in range(3):
        for b in range(a, 3):
            e = R[a][0] * R[b][0] * s2[0] + R[a][1] * R[b][1] * s2[1] + R[a][2] * R[b][2] * s2[2]
            entries[(a, b)] = e
    cols = [entries[(min(a, b), max(a, b))] for a in range(3) for b in range(3)]
    flat = ad.stack_cols(cols)
    return flat.reshape(scale.shape[0], 3, 3)


def assemble_covariance(raw_scale: Tensor, raw_quat: Tensor) -> Tensor:
    """Sigma from raw attributes: softplus on scales, normalization on quats."""
    scale = ad.softplus(raw_scale)
    quat = normalize_quat(raw_quat)
    return covariance_from_activated(scale, quat)


# -- spherical harmonics -------------------------------------------------------


@dataclass
class SHBasis:
    """Real SH basis with max band ``degree`` (0..3), (degree+1)^2 coefficients."""

    degree: int = 0

    def __post_init__(self):
        if not 0 <= self.degree <= 3:
            raise ValueError("supported SH degrees are 0..3")

    @property
    def n_coeffs(self) -> int:
        return (self.degree + 1) ** 2

    def basis_values(self, dirs: np.ndarray) -> np.ndarray:
        """Basis functions at unit directions: (M, 3) -> (M, n_coeffs)."""
        dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError("SH evaluation requires unit direction vectors")
        m = dirs.shape[0]
        out = np.empty((m, self.n_coeffs))
        out[:, 0] = SH_C0
        if self.degree >= 1:
            x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
            out[:, 1] = -SH_C1 * y
            out[:, 2] = SH_C1 * z
            out[:, 3] = -SH_C1 * x
        if self.degree >= 2:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            out[:, 4] = SH_C2[0] * xy
            out[:, 5] = SH_C2[1] * yz
            out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
            out[:, 7] = SH_C2[3] * xz
            out[:, 8] = SH_C2[4] * (xx - yy)
        if self.degree >= 3:
            out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
            out[:, 10] = SH_C3[1] * xy * z
            out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
            out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
            out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
            out[:, 14] = SH_C3[5] * z * (xx - yy)
            out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
        return out


def eval_sh(sh_coeffs: Tensor, dirs: np.ndarray, degree: int) -> Tensor:
    """View-dependent rgb from SH coefficients.

    sh_coeffs: (M, n_coeffs, 3) tensor; dirs: (M, 3) unit directions
    (constant). Returns (M, 3) colors, clamp(sh + 0.5, 0, 1).
    """
    basis = SHBasis(degree)
    b = basis.basis_values(dirs)  # (M, n)
    m, n = b.shape
    if sh_coeffs.shape != (m, n, 3):
        raise ValueError(f"expected sh coefficients of shape {(m, n, 3)}, got {sh_coeffs.shape}")
    bt = ad.Tensor(np.repeat(b[:, :, None], 3, axis=2))
    raw = (sh_coeffs * bt).sum(axis=1)
    return ad.clamp(raw + 0.5, 0.0, 1.0)
