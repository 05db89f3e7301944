"""Point-wise feature interaction: KNN neighborhoods, learned relative
positional encoding, and vector self-attention over each neighborhood.

Every point attends to itself plus its K nearest neighbors. The attention
weight is a full 56-channel vector (softmax over the neighbor axis per
channel) applied by Hadamard product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import kaiming_uniform
from .scene import FEATURE_DIM

BRUTE_FORCE_LIMIT = 20000
_BLOCK = 256


@dataclass
class NeighborGraph:
    """Per-point neighbor index lists, self first, ties by index ascending."""

    idx: np.ndarray  # (M, min(K+1, M)) int64
    k: int

    def __len__(self):
        return self.idx.shape[0]


def knn(points: np.ndarray, k: int, brute_force_limit: int = BRUTE_FORCE_LIMIT) -> NeighborGraph:
    """Exact K-nearest-neighbor graph (self included as the first entry).

    Distance ties break by point index ascending. Brute force in blocks up
    to ``brute_force_limit`` points, a uniform-grid search above.
    """
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    if m < 1:
        raise ValueError("knn needs at least one point")
    kk = min(k + 1, m)
    if m <= brute_force_limit:
        idx = _knn_brute(points, kk)
    else:
        idx = _knn_grid(points, kk)
    return NeighborGraph(idx=idx, k=k)


def _knn_brute(points: np.ndarray, kk: int) -> np.ndarray:
    m = points.shape[0]
    sq = (points * points).sum(axis=1)
    out = np.empty((m, kk), dtype=np.int64)
    for lo in range(0, m, _BLOCK):
        hi = min(lo + _BLOCK, m)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * points[lo:hi] @ points.T
        d2[np.arange(lo, hi) - lo, np.arange(lo, hi)] = -1.0  # self always first
        # stable sort on distance keeps index-ascending tie order
        order = np.argsort(d2, axis=1, kind="stable")
        out[lo:hi] = order[:, :kk]
    return out


def _knn_grid(points: np.ndarray, kk: int) -> np.ndarray:
    """Exact grid-bucketed KNN with expanding Chebyshev rings."""
    m = points.shape[0]
    lo = points.min(axis=0)
    span = np.maximum(points.max(axis=0) - lo, 1e-12)
    # aim for a handful of points per cell
    n_cells = max(1, int(round((m / 8.0) ** (1.0 / 3.0))))
    cell = span.max() / n_cells
    coords = np.floor((points - lo) / cell).astype(np.int64)
    buckets: dict = {}
    for i, c in enumerate(map(tuple, coords)):
        buckets.setdefault(c, []).append(i)

    out = np.empty((m, kk), dtype=np.int64)
    for i in range(m):
        ci = coords[i]
        cand: list[int] = []
        ring = 0
        best_kth = np.inf
        while True:
            shell = _ring_cells(ci, ring)
            for c in shell:
                cand.extend(buckets.get(c, ()))
            if len(cand) >= kk:
                d2 = ((points[cand] - points[i]) ** 2).sum(axis=1)
                d2[np.asarray(cand) == i] = -1.0
                order = np.lexsort((np.asarray(cand), d2))
                best_kth = d2[order[kk - 1]]
            # smallest possible distance from the next ring outward
            next_lb = ring * cell
            if len(cand) >= kk and next_lb * next_lb > best_kth:
                break
            ring += 1
            if ring > 3 * n_cells + 2:  # cloud fits in the grid; safety stop
                break
        d2 = ((points[cand] - points[i]) ** 2).sum(axis=1)
        d2[np.asarray(cand) == i] = -1.0
        order = np.lexsort((np.asarray(cand), d2))
        out[i] = np.asarray(cand)[order[:kk]]
    return out


def _ring_cells(center, ring: int):
    cx, cy, cz = (int(v) for v in center)
    if ring == 0:
        return [(cx, cy, cz)]
    cells = []
    r = ring
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                if max(abs(dx), abs(dy), abs(dz)) == r:
                    cells.append((cx + dx, cy + dy, cz + dz))
    return cells


# -- attention block -----------------------------------------------------------


@dataclass
class AttentionBlock:
    """Trainable maps of the vector self-attention operator.

    phi/psi/alpha are bias-free linear feature transforms; gamma maps the
    attention logits (two linear layers, one ReLU); theta embeds coordinate
    differences into the feature space (two linear layers, one ReLU).
    """

    weights: dict  # name -> Tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


def init_attention_block(rng: np.random.Generator, hidden: int = 64) -> AttentionBlock:
    d = FEATURE_DIM
    w = {
        "phi": Tensor(kaiming_uniform(rng, (d, d), d), requires_grad=True),
        "psi": Tensor(kaiming_uniform(rng, (d, d), d), requires_grad=True),
        "alpha": Tensor(kaiming_uniform(rng, (d, d), d), requires_grad=True),
        "gamma_w1": Tensor(kaiming_uniform(rng, (d, hidden), d), requires_grad=True),
        "gamma_b1": Tensor(np.zeros(hidden), requires_grad=True),
        "gamma_w2": Tensor(kaiming_uniform(rng, (hidden, d), hidden), requires_grad=True),
        "gamma_b2": Tensor(np.zeros(d), requires_grad=True),
        "theta_w1": Tensor(kaiming_uniform(rng, (3, hidden), 3), requires_grad=True),
        "theta_b1": Tensor(np.zeros(hidden), requires_grad=True),
        "theta_w2": Tensor(kaiming_uniform(rng, (hidden, d), hidden), requires_grad=True),
        "theta_b2": Tensor(np.zeros(d), requires_grad=True),
    }
    return AttentionBlock(weights=w)


def flatten_block(block: AttentionBlock):
    names = sorted(block.weights)
    return names, [block.weights[n].data.copy() for n in names]


def unflatten_block(names, tensors) -> AttentionBlock:
    return AttentionBlock(weights=dict(zip(names, tensors)))


def _mlp2(x: Tensor, block, prefix: str) -> Tensor:
    h = ad.relu(x @ block[f"{prefix}_w1"] + block[f"{prefix}_b1"])
    return h @ block[f"{prefix}_w2"] + block[f"{prefix}_b2"]


def pos_encode(diffs, block) -> Tensor:
    """theta(x_i - x_j): coordinate differences (N, 3) -> (N, 56)."""
    diffs = ad._wrap(np.asarray(diffs, dtype=ad.default_dtype()) if not isinstance(diffs, Tensor) else diffs)
    return _mlp2(diffs, block, "theta")


def attend(feat, positions: np.ndarray, graph: NeighborGraph, block: AttentionBlock,
           return_weights: bool = False):
    """Vector self-attention over KNN neighborhoods.

    feat: (M, 56) Tensor; positions: (M, 3) constants. For each point i and
    channel c the neighbor weights softmax to one; the weighted values are
    alpha(f_j) + theta(x_i - x_j), summed over the neighborhood.
    """
    feat = ad._wrap(feat)
    m, d = feat.shape
    if d != FEATURE_DIM:
        raise ValueError(f"expected {FEATURE_DIM}-dim features, got {d}")
    idx = graph.idx
    kk = idx.shape[1]
    self_idx = np.repeat(np.arange(m, dtype=np.int64)[:, None], kk, axis=1)

    positions = np.asarray(positions, dtype=np.float64)
    diffs = (positions[self_idx.reshape(-1)] - positions[idx.reshape(-1)])
    delta = _mlp2(Tensor(diffs), block, "theta")                    # (M*kk, 56)

    phi_f = feat @ block["phi"]
    psi_f = feat @ block["psi"]
    alpha_f = feat @ block["alpha"]

    phi_i = ad.gather_rows(phi_f, self_idx.reshape(-1))             # (M*kk, 56)
    psi_j = ad.gather_rows(psi_f, idx.reshape(-1))
    alpha_j = ad.gather_rows(alpha_f, idx.reshape(-1))

    logits = _mlp2(phi_i - psi_j + delta, block, "gamma")
    weights = ad.softmax(logits.reshape(m, kk, d), axis=1)
    values = (alpha_j + delta).reshape(m, kk, d)
    out = (weights * values).sum(axis=1)
    if return_weights:
        return out, weights
    return out


def attend_disabled(feat: Tensor) -> Tensor:
    """Identity pass-through for the no-interaction ablation."""
    return feat
