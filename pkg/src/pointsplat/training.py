"""Adam, the densify/prune schedule, the training loop, and checkpoint I/O."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import features, interaction, losses, metrics
from .autodiff import Tape, Tensor
from .config import TrainConfig, config_from_dict
from .pipeline import SplatModel

CHECKPOINT_MAGIC = "pointsplat-checkpoint 1"


@dataclass
class AdamState:
    """First/second moment estimates and step count for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam:
    """Bias-corrected Adam over named parameter groups; updates land in
    place on the tensors, outside any tape."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.params: dict[str, tuple[Tensor, float]] = {}
        self.state: dict[str, AdamState] = {}
        for name, tensor, lr in params:
            self.add_param(name, tensor, lr)

    def add_param(self, name: str, tensor: Tensor, lr: float) -> None:
        self.params[name] = (tensor, lr)
        self.state[name] = AdamState(
            m=np.zeros_like(tensor.data, dtype=np.float64),
            v=np.zeros_like(tensor.data, dtype=np.float64))

    def replace_param(self, name: str, tensor: Tensor, keep: np.ndarray | None,
                      n_new: int) -> None:
        """Swap in a resized point parameter: rows ``keep`` survive with
        their moments, the n_new fresh rows start at zero."""
        _, lr = self.params[name]
        st = self.state[name]
        if keep is None:
            keep = np.arange(st.m.shape[0])
        pad = (n_new,) + st.m.shape[1:]
        st.m = np.concatenate([st.m[keep], np.zeros(pad)], axis=0)
        st.v = np.concatenate([st.v[keep], np.zeros(pad)], axis=0)
        self.params[name] = (tensor, lr)

    def zero_grad(self) -> None:
        for tensor, _ in self.params.values():
            tensor.grad = None

    def step(self) -> None:
        for name, (tensor, lr) in self.params.items():
            g = tensor.grad
            if g is None:
                continue
            st = self.state[name]
            st.t += 1
            g = np.asarray(g, dtype=np.float64)
            st.m = self.beta1 * st.m + (1.0 - self.beta1) * g
            st.v = self.beta2 * st.v + (1.0 - self.beta2) * (g * g)
            m_hat = st.m / (1.0 - self.beta1 ** st.t)
            v_hat = st.v / (1.0 - self.beta2 ** st.t)
            upd = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            tensor.data = (tensor.data.astype(np.float64) - upd).astype(tensor.data.dtype)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> np.ndarray:
    """One functional Adam update on a bare array (used by tests/tools)."""
    g = np.asarray(grads, dtype=np.float64)
    p = np.asarray(params, dtype=np.float64)
    if g.shape != p.shape:
        raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    return p - lr * m_hat / (np.sqrt(v_hat) + eps)


# -- densification ---------------------------------------------------------------


@dataclass
class GradAccumulator:
    """Mean view-space positional gradient per point since the last event."""

    norm_sum: np.ndarray
    seen: np.ndarray

    @classmethod
    def empty(cls, m: int) -> "GradAccumulator":
        return cls(norm_sum=np.zeros(m), seen=np.zeros(m))

    def update(self, stats: dict, image_size: int) -> None:
        if "g2d_norm" not in stats:
            return
        # pixel-space gradients scaled to the half-image convention the
        # threshold is calibrated for
        self.norm_sum += stats["g2d_norm"] * (2.0 / image_size)
        self.seen += stats["visible"].astype(np.float64)

    def mean_norm(self) -> np.ndarray:
        return self.norm_sum / np.maximum(self.seen, 1.0)


def densify_and_prune(model: SplatModel, accum: GradAccumulator,
                      decoded: dict, rng: np.random.Generator,
                      optimizer: Adam | None = None) -> dict:
    """Clone small / split large high-gradient points, prune transparent or
    oversized ones, and keep every array (leaves, caches, Adam moments)
    row-aligned. Returns a small report dict."""
    cfg = model.config
    m = len(model)
    mean_grad = accum.mean_norm()
    world_scale = decoded["scale"].max(axis=1)
    opacity = decoded["opacity"]

    hot = (mean_grad > cfg.densify_grad_threshold) & (accum.seen > 0)
    small = world_scale <= cfg.clone_small_fraction * model.extent
    clone_ids = np.where(hot & small)[0]
    split_ids = np.where(hot & ~small)[0]

    prune = (opacity < cfg.prune_opacity) | (world_scale > cfg.big_point_fraction * model.extent)
    if (m - prune.sum()) < cfg.min_points:
        # degenerate-collapse guard: retain the most opaque points
        order = np.argsort(-opacity, kind="stable")
        protect = order[:cfg.min_points]
        prune[protect] = False
    keep = np.where(~prune)[0]

    new_mu, new_parent, new_scale_mod = [], [], []
    for i in clone_ids:
        if prune[i]:
            continue
        new_mu.append(model.cloud.mu.data[i].copy())
        new_parent.append(i)
        new_scale_mod.append(model.scale_mod[i].copy())
    for i in split_ids:
        if prune[i]:
            continue
        # sample the second center from the point's own footprint
        from .scene import quat_to_rot
        R = quat_to_rot(decoded["quat"][i])
        eps = rng.normal(size=3) * decoded["scale"][i]
        new_mu.append(model.cloud.mu.data[i] + R @ eps)
        new_parent.append(i)
        new_scale_mod.append(model.scale_mod[i] / cfg.split_scale_shrink)
        model.scale_mod[i] /= cfg.split_scale_shrink

    n_new = len(new_mu)
    report = {"cloned": len(clone_ids), "split": len(split_ids),
              "pruned": int(prune.sum()), "new": n_new, "m_after": len(keep) + n_new}
    if n_new == 0 and not prune.any():
        return report

    old = model.cloud
    parents = np.asarray(new_parent, dtype=np.int64)
    mu_new = (np.concatenate([old.mu.data[keep]] + ([np.stack(new_mu)] if n_new else []), axis=0))
    model.cloud.mu = Tensor(mu_new, requires_grad=True)
    model.scale_mod = np.concatenate(
        [model.scale_mod[keep]] + ([np.stack(new_scale_mod)] if n_new else []), axis=0)

    if cfg.color_mode == "learned":
        feat_old = old.feat.data
        if n_new:
            # fresh multi-view sample at the child centers plus the parent's
            # learned residual over its own cached fused value
            fused_new, samples_new, flags_new = model._sample_fuse(np.stack(new_mu))
            seen_any = model.flag_cache[:, parents].any(axis=0) if model.flag_cache is not None else None
            child_seen = flags_new.any(axis=0)
            residual = feat_old[parents] - model.fused_cache[parents]
            feat_children = fused_new + residual
            # out-of-view children inherit the parent feature and its cache
            blind = ~child_seen
            if blind.any():
                feat_children[blind] = feat_old[parents[blind]]
                fused_new[blind] = model.fused_cache[parents[blind]]
                samples_new[:, blind] = model.sample_cache[:, parents[blind]]
                flags_new[:, blind] = model.flag_cache[:, parents[blind]]
            model.cloud.feat = Tensor(
                np.concatenate([feat_old[keep], feat_children], axis=0), requires_grad=True)
            model.fused_cache = np.concatenate([model.fused_cache[keep], fused_new], axis=0)
            model.sample_cache = np.concatenate(
                [model.sample_cache[:, keep], samples_new], axis=1)
            model.flag_cache = np.concatenate(
                [model.flag_cache[:, keep], flags_new], axis=1)
        else:
            model.cloud.feat = Tensor(feat_old[keep], requires_grad=True)
            model.fused_cache = model.fused_cache[keep]
            model.sample_cache = model.sample_cache[:, keep]
            model.flag_cache = model.flag_cache[:, keep]
    else:
        def resize(t: Tensor, inherit_from=None):
            base = t.data[keep]
            if n_new:
                rows = t.data[parents]
                if inherit_from is not None:
                    rows = inherit_from(rows)
                base = np.concatenate([base, rows], axis=0)
            return Tensor(base, requires_grad=True)

        model.cloud.sh = resize(old.sh)
        model.cloud.raw_opacity = resize(old.raw_opacity)
        model.cloud.raw_scale = resize(old.raw_scale)
        model.cloud.raw_quat = resize(old.raw_quat)

    if optimizer is not None:
        for name in model.point_param_names():
            tensor = {"mu": model.cloud.mu, "feat": model.cloud.feat,
                      "sh": model.cloud.sh, "raw_opacity": model.cloud.raw_opacity,
                      "raw_scale": model.cloud.raw_scale,
                      "raw_quat": model.cloud.raw_quat}[name]
            optimizer.replace_param(name, tensor, keep, n_new)
    model.neighbor_graph(force=True)
    return report


# -- training loop ------------------------------------------------------------------


CSV_FIELDS = ["iter", "l1", "ssim", "l_depth", "l_smooth", "total", "psnr", "m"]


class NanLossError(RuntimeError):
    pass


def train(dataset, config: TrainConfig, out_dir, quiet: bool = False) -> dict:
    """Optimize a model on the dataset's training views.

    Writes metrics.csv (one row per iteration) and checkpoint.psc into
    out_dir; returns a summary dict. Deterministic for a fixed seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    weights = config.loss_weights()

    train_cams = [dataset.cameras[i] for i in dataset.train_ids]
    train_imgs = [dataset.images[i] for i in dataset.train_ids]
    train_depths = [dataset.depths[i] for i in dataset.train_ids]

    model = SplatModel(dataset.init_points, config, dataset.extent, rng,
                       colors=dataset.init_colors)
    model.init_features(train_imgs, train_cams)
    optimizer = Adam([(n, t, model.lr_for(g)) for n, t, g in model.parameters()])
    accum = GradAccumulator.empty(len(model))

    image_size = max(train_cams[0].width, train_cams[0].height)
    csv_path = out_dir / "metrics.csv"
    last_report = {}
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for it in range(1, config.iters + 1):
            view = (it - 1) % len(train_cams)
            cam, gt, prior = train_cams[view], train_imgs[view], train_depths[view]
            gt_t = Tensor(gt.astype(ad.default_dtype()))

            with Tape():
                out = model.forward(cam, collect_stats=True)
                l1 = ad.absolute(out.image - gt_t).mean()
                ssim_val = losses.ssim(out.image, gt_t)
                l_color = weights.lambda1 * l1 + weights.lambda2 * (1.0 - ssim_val)
                l_depth = losses.loss_depth(out.depth, out.weight, prior,
                                            config.depth_weight_threshold)
                l_smooth = losses.loss_smooth(out.depth, gt,
                                              weights.alpha1, weights.alpha2)
                total = losses.loss_total(l_color, l_depth, l_smooth, weights)
            sub = {"l1": l1.item(), "ssim": ssim_val.item(),
                   "l_depth": l_depth.item(), "l_smooth": l_smooth.item(),
                   "total": total.item()}
            if not np.isfinite(sub["total"]):
                raise NanLossError(
                    f"non-finite loss at iteration {it}: {sub}")
            total.backward()
            accum.update(out.stats, image_size)
            optimizer.step()
            optimizer.zero_grad()

            psnr = metrics.psnr(np.clip(out.image.data, 0.0, 1.0), gt)
            writer.writerow([it,
                             f"{sub['l1']:.7g}", f"{sub['ssim']:.7g}",
                             f"{sub['l_depth']:.7g}", f"{sub['l_smooth']:.7g}",
                             f"{sub['total']:.7g}", f"{psnr:.7g}", len(model)])

            if (it >= config.densify_start and config.densify_every > 0
                    and (it - config.densify_start) % config.densify_every == 0):
                last_report = densify_and_prune(model, accum, out.decoded, rng, optimizer)
                accum = GradAccumulator.empty(len(model))
            if not quiet and (it % config.log_every == 0 or it == 1):
                print(f"iter {it:5d}  total {sub['total']:.5f}  l1 {sub['l1']:.5f}  "
                      f"ssim {sub['ssim']:.4f}  psnr {psnr:.2f}  M {len(model)}")

    ckpt_path = out_dir / "checkpoint.psc"
    save_checkpoint(ckpt_path, model)
    return {"model": model, "checkpoint": str(ckpt_path),
            "metrics_csv": str(csv_path), "final_psnr": psnr,
            "densify_report": last_report}


# -- checkpoint format -----------------------------------------------------------------
#
# Text header:  line 1 magic+version, line 2 a JSON object with the config
# echo, mode, extent, and the array manifest [{name, shape}] in order, then
# "END_HEADER". Payload: the arrays as little-endian float32, concatenated
# in manifest order.


def _model_arrays(model: SplatModel) -> list[tuple[str, np.ndarray]]:
    arrays = [("mu", model.cloud.mu.data), ("scale_mod", model.scale_mod)]
    if model.config.color_mode == "learned":
        arrays.append(("feat", model.cloud.feat.data))
        for n in sorted(model.heads.weights):
            arrays.append((f"head_{n}", model.heads.weights[n].data))
        if model.attn is not None:
            for n in sorted(model.attn.weights):
                arrays.append((f"attn_{n}", model.attn.weights[n].data))
    else:
        arrays += [("sh", model.cloud.sh.data),
                   ("raw_opacity", model.cloud.raw_opacity.data),
                   ("raw_scale", model.cloud.raw_scale.data),
                   ("raw_quat", model.cloud.raw_quat.data)]
    return arrays


def save_checkpoint(path, model: SplatModel) -> None:
    arrays = _model_arrays(model)
    header = {
        "config": model.config.to_dict(),
        "extent": model.extent,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode())
        fh.write((json.dumps(header) + "\n").encode())
        fh.write(b"END_HEADER\n")
        for _, a in arrays:
            fh.write(np.asarray(a, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> SplatModel:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().strip()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (bad magic {magic!r})")
        header = json.loads(fh.readline().decode())
        terminator = fh.readline().decode().strip()
        if terminator != "END_HEADER":
            raise ValueError("corrupt checkpoint header")
        payload = fh.read()

    config = config_from_dict(header["config"])
    arrays = {}
    off = 0
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        off += 4 * n
    if off != len(payload):
        raise ValueError("checkpoint payload size does not match its manifest")

    rng = np.random.default_rng(config.seed)
    model = SplatModel(arrays["mu"], config, header["extent"], rng)
    model.scale_mod = arrays["scale_mod"]
    if config.color_mode == "learned":
        model.cloud.feat = Tensor(arrays["feat"], requires_grad=True)
        for n in sorted(model.heads.weights):
            model.heads.weights[n].data = arrays[f"head_{n}"].astype(
                model.heads.weights[n].data.dtype)
        if model.attn is not None:
            for n in sorted(model.attn.weights):
                model.attn.weights[n].data = arrays[f"attn_{n}"].astype(
                    model.attn.weights[n].data.dtype)
    else:
        model.cloud.sh = Tensor(arrays["sh"], requires_grad=True)
        model.cloud.raw_opacity = Tensor(arrays["raw_opacity"], requires_grad=True)
        model.cloud.raw_scale = Tensor(arrays["raw_scale"], requires_grad=True)
        model.cloud.raw_quat = Tensor(arrays["raw_quat"], requires_grad=True)
    return model
