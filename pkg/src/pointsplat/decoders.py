"""MLP attribute decoders: per-Gaussian color/opacity and scale/rotation
from sinusoidal position encoding, view direction, and enhanced features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import kaiming_uniform
from .scene import FEATURE_DIM, normalize_quat

QUAT_EPS = 1e-8
DEFAULT_PE_BANDS = 4
OPACITY_BIAS_INIT = float(np.log(0.1 / 0.9))  # sigmoid^-1(0.1)


def positional_encode(x: np.ndarray, bands: int) -> np.ndarray:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)].

    bands = 0 returns the raw coordinates (the no-encoding ablation).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    parts = [x]
    for level in range(bands):
        f = (2.0 ** level) * np.pi
        parts.append(np.sin(f * x))
        parts.append(np.cos(f * x))
    out = np.concatenate(parts, axis=1)
    return out


def pe_dim(bands: int) -> int:
    return 3 + 6 * bands


def decoder_input(points: np.ndarray, view_dirs: np.ndarray, feat,
                  pe_bands: int = DEFAULT_PE_BANDS, geometry_view_dir: bool = True):
    """Concatenate [PE(X) | view_dir | feat]; positions and directions are
    constants, so gradients flow only into the features."""
    feat = ad._wrap(feat)
    pe = positional_encode(points, pe_bands).astype(feat.dtype)
    vd = np.asarray(view_dirs, dtype=feat.dtype)
    if not geometry_view_dir:
        vd = np.zeros_like(vd)
    return ad.concat([Tensor(pe), Tensor(vd), feat], axis=1)


@dataclass
class DecoderHeads:
    """Two MLPs over the same input: appearance (rgb + opacity via sigmoid)
    and geometry (3 scales via softplus, 4 quaternion components via
    normalization). Hidden width 64, two hidden layers, ReLU."""

    weights: dict
    pe_bands: int = DEFAULT_PE_BANDS

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


def init_decoder_heads(rng: np.random.Generator, pe_bands: int = DEFAULT_PE_BANDS,
                       hidden: int = 64, scale_bias: float = 0.0) -> DecoderHeads:
    """Fresh heads. The opacity output bias starts at sigmoid^-1(0.1) so
    early renders are translucent; scale_bias (inverse-softplus of a typical
    world scale) keeps first footprints sane."""
    d_in = pe_dim(pe_bands) + 3 + FEATURE_DIM
    w = {}
    for head, d_out in (("a", 4), ("b", 7)):
        w[f"{head}_w0"] = Tensor(kaiming_uniform(rng, (d_in, hidden), d_in), requires_grad=True)
        w[f"{head}_b0"] = Tensor(np.zeros(hidden), requires_grad=True)
        w[f"{head}_w1"] = Tensor(kaiming_uniform(rng, (hidden, hidden), hidden), requires_grad=True)
        w[f"{head}_b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        w[f"{head}_w2"] = Tensor(kaiming_uniform(rng, (hidden, d_out), hidden), requires_grad=True)
        b_out = np.zeros(d_out)
        if head == "a":
            b_out[3] = OPACITY_BIAS_INIT
        else:
            b_out[0:3] = scale_bias
            b_out[3] = 1.0  # bias the quaternion toward identity
        w[f"{head}_b2"] = Tensor(b_out, requires_grad=True)
    return DecoderHeads(weights=w, pe_bands=pe_bands)


def flatten_heads(heads: DecoderHeads):
    names = sorted(heads.weights)
    return names, [heads.weights[n].data.copy() for n in names]


def unflatten_heads(names, tensors, pe_bands: int = 2) -> DecoderHeads:
    return DecoderHeads(weights=dict(zip(names, tensors)), pe_bands=pe_bands)


def _head_forward(inp: Tensor, heads, prefix: str) -> Tensor:
    h = ad.relu(inp @ heads[f"{prefix}_w0"] + heads[f"{prefix}_b0"])
    h = ad.relu(h @ heads[f"{prefix}_w1"] + heads[f"{prefix}_b1"])
    return h @ heads[f"{prefix}_w2"] + heads[f"{prefix}_b2"]


def decode_appearance(inp: Tensor, heads) -> tuple[Tensor, Tensor]:
    """(rgb (M, 3), opacity (M,)) in (0, 1)."""
    raw = _head_forward(inp, heads, "a")
    out = ad.sigmoid(raw)
    return out[:, 0:3], out[:, 3]


def decode_geometry(inp: Tensor, heads) -> tuple[Tensor, Tensor]:
    """(scale (M, 3) > 0, unit quaternion (M, 4)).

    A tiny epsilon is added to the quaternion scalar component before
    normalization, guarding the all-zero corner of a fresh network.
    """
    raw = _head_forward(inp, heads, "b")
    scale = ad.softplus(raw[:, 0:3])
    quat = normalize_quat(raw[:, 3:7], eps_w=QUAT_EPS)
    return scale, quat
