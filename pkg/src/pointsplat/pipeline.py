"""End-to-end splat model: trainable leaves plus the per-view forward pass
(features -> interaction -> decoders -> rasterizer)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import decoders, features, interaction, losses, raster, scene
from .autodiff import Tensor
from .config import TrainConfig
from .scene import Camera, GaussianCloud


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(max(y, 1e-8))))


def inverse_sigmoid(y: float) -> float:
    return float(np.log(y / (1.0 - y)))


def mean_nn_distance(points: np.ndarray) -> float:
    """Average distance to the nearest neighbor; the scale-init heuristic."""
    if len(points) < 2:
        return 0.05
    g = interaction.knn(points, 1)
    d = np.linalg.norm(points - points[g.idx[:, 1]], axis=1)
    return float(np.clip(d.mean(), 1e-4, 1.0))


@dataclass
class RenderOutput:
    image: Tensor
    depth: Tensor
    weight: Tensor
    stats: dict
    decoded: dict


class SplatModel:
    """Gaussian cloud plus the networks that decode its attributes.

    color_mode "learned": trainable per-point features feed KNN attention
    and two MLP heads that decode color/opacity/scale/rotation per view.
    color_mode "sh": the classic direct parametrization (SH color, raw
    opacity/scale/quaternion leaves) used by the color-representation
    ablation.
    """

    def __init__(self, points: np.ndarray, config: TrainConfig, extent: float,
                 rng: np.random.Generator, colors: np.ndarray | None = None):
        self.config = config
        self.extent = float(extent)
        self.rng = rng
        m = len(points)
        pts = np.asarray(points, dtype=np.float64)
        nn_dist = mean_nn_distance(pts)

        self.cloud = GaussianCloud(mu=Tensor(pts, requires_grad=True))
        # constant per-point multiplier on the decoded scale; split children
        # shrink through it because decoded scales are not leaves
        self.scale_mod = np.ones((m, 3), dtype=np.float64)
        self.encoder = None
        self.pyramids = None
        self.sample_cache = None
        self.flag_cache = None
        self.fused_cache = None
        self.graph = None
        self._graph_age = 0

        if config.color_mode == "learned":
            self.cloud.feat = Tensor(np.zeros((m, scene.FEATURE_DIM)), requires_grad=True)
            self.heads = decoders.init_decoder_heads(
                rng, pe_bands=config.pe_bands, hidden=config.hidden_dim,
                scale_bias=inverse_softplus(nn_dist))
            self.attn = (interaction.init_attention_block(rng, hidden=config.hidden_dim)
                         if config.knn_k > 0 else None)
        else:
            n_coeff = (config.sh_degree + 1) ** 2
            sh = np.zeros((m, n_coeff, 3))
            if colors is not None:
                sh[:, 0, :] = (np.asarray(colors) - 0.5) / scene.SH_C0
            self.cloud.sh = Tensor(sh, requires_grad=True)
            self.cloud.raw_opacity = Tensor(
                np.full((m, 1), inverse_sigmoid(0.1)), requires_grad=True)
            self.cloud.raw_scale = Tensor(
                np.full((m, 3), inverse_softplus(nn_dist)), requires_grad=True)
            quat = np.zeros((m, 4))
            quat[:, 0] = 1.0
            self.cloud.raw_quat = Tensor(quat, requires_grad=True)
            self.heads = None
            self.attn = None

    def __len__(self):
        return len(self.cloud)

    # -- setup ------------------------------------------------------------------

    def init_features(self, images, cameras) -> None:
        """Build the (frozen) encoder, cache per-view pyramids, and seed the
        trainable features from sampled-and-fused multi-view values."""
        if self.config.color_mode != "learned":
            return
        self.encoder = features.init_encoder_weights(self.rng)
        self.view_cameras = list(cameras)
        self.pyramids = [features.build_pyramid(Tensor(np.asarray(img)), self.encoder)
                         for img in images]
        fused, samples, flags = self._sample_fuse(self.cloud.mu.data)
        self.cloud.feat = Tensor(fused, requires_grad=True)
        self.fused_cache = fused.copy()
        self.sample_cache = samples
        self.flag_cache = flags

    def _sample_fuse(self, points: np.ndarray):
        fuse = features.FUSION_MODES[self.config.fusion]
        samples, flags = [], []
        for pyr, cam in zip(self.pyramids, self.view_cameras):
            s, f = features.sample_points(pyr, points, cam)
            samples.append(s)
            flags.append(f)
        fused = fuse(samples, flags)
        return (fused.data.copy(),
                np.stack([s.data for s in samples], axis=0),
                np.stack(flags, axis=0))

    # -- neighbor graph -----------------------------------------------------------

    def neighbor_graph(self, force: bool = False) -> interaction.NeighborGraph:
        stale = (self.graph is None or force
                 or self.graph.idx.shape[0] != len(self)
                 or self._graph_age >= self.config.knn_refresh)
        if stale and self.config.knn_k > 0:
            self.graph = interaction.knn(self.cloud.mu.data, self.config.knn_k)
            self._graph_age = 0
        self._graph_age += 1
        return self.graph

    # -- forward -------------------------------------------------------------------

    def decode_attributes(self, camera: Camera):
        """Per-view attributes: (color, opacity, covariance) Tensors."""
        cfg = self.config
        mu_const = self.cloud.mu.data
        if cfg.color_mode == "learned":
            f = self.cloud.feat
            if cfg.knn_k > 0:
                f_hat = interaction.attend(f, mu_const, self.neighbor_graph(), self.attn)
            else:
                f_hat = interaction.attend_disabled(f)
            self.cloud.feat_enh = f_hat.data
            vdirs = camera.point_dirs(mu_const)
            inp_a = decoders.decoder_input(mu_const, vdirs, f_hat, cfg.pe_bands)
            rgb, opac = decoders.decode_appearance(inp_a, self.heads)
            if cfg.geometry_view_dir:
                inp_b = inp_a
            else:
                inp_b = decoders.decoder_input(mu_const, vdirs, f_hat, cfg.pe_bands,
                                               geometry_view_dir=False)
            scale, quat = decoders.decode_geometry(inp_b, self.heads)
            scale = scale * Tensor(self.scale_mod.astype(scale.dtype))
            sigma = scene.covariance_from_activated(scale, quat)
            decoded = {"opacity": opac.data.copy(), "scale": scale.data.copy(),
                       "quat": quat.data.copy(), "rgb": rgb.data.copy()}
            return rgb, opac, sigma, decoded
        # SH ablation path
        vdirs = camera.point_dirs(mu_const)
        rgb = scene.eval_sh(self.cloud.sh, vdirs, cfg.sh_degree)
        opac = ad.sigmoid(self.cloud.raw_opacity).reshape(len(self))
        scale = ad.softplus(self.cloud.raw_scale) * Tensor(
            self.scale_mod.astype(ad.default_dtype()))
        quat = scene.normalize_quat(self.cloud.raw_quat, eps_w=decoders.QUAT_EPS)
        sigma = scene.covariance_from_activated(scale, quat)
        decoded = {"opacity": opac.data.copy(), "scale": scale.data.copy(),
                   "quat": quat.data.copy(), "rgb": rgb.data.copy()}
        return rgb, opac, sigma, decoded

    def forward(self, camera: Camera, collect_stats: bool = False) -> RenderOutput:
        rgb, opac, sigma, decoded = self.decode_attributes(camera)
        stats: dict = {}
        image, depth, weight = raster.render(
            self.cloud.mu, sigma, rgb, opac, camera,
            background=np.asarray(self.config.background),
            stats=stats if collect_stats else None)
        return RenderOutput(image=image, depth=depth, weight=weight,
                            stats=stats, decoded=decoded)

    def render_view(self, camera: Camera):
        """Inference render; returns numpy (image, depth, weight)."""
        out = self.forward(camera)
        return out.image.data, out.depth.data, out.weight.data

    # -- parameters ------------------------------------------------------------------

    def parameters(self) -> list[tuple[str, Tensor, str]]:
        """(name, tensor, lr-group) triples for the optimizer."""
        cfg = self.config
        params = [("mu", self.cloud.mu, "position")]
        if cfg.color_mode == "learned":
            params.append(("feat", self.cloud.feat, "features"))
            for n in sorted(self.heads.weights):
                params.append((f"head_{n}", self.heads.weights[n], "weights"))
            if self.attn is not None:
                for n in sorted(self.attn.weights):
                    params.append((f"attn_{n}", self.attn.weights[n], "weights"))
        else:
            params.append(("sh", self.cloud.sh, "sh"))
            params.append(("raw_opacity", self.cloud.raw_opacity, "opacity"))
            params.append(("raw_scale", self.cloud.raw_scale, "scale"))
            params.append(("raw_quat", self.cloud.raw_quat, "rotation"))
        return params

    def point_param_names(self) -> list[str]:
        if self.config.color_mode == "learned":
            return ["mu", "feat"]
        return ["mu", "sh", "raw_opacity", "raw_scale", "raw_quat"]

    def lr_for(self, group: str) -> float:
        cfg = self.config
        return {
            "position": cfg.lr_position * self.extent,
            "features": cfg.lr_features,
            "weights": cfg.lr_weights,
            "sh": cfg.lr_sh,
            "opacity": cfg.lr_opacity,
            "scale": cfg.lr_scale,
            "rotation": cfg.lr_rotation,
        }[group]
