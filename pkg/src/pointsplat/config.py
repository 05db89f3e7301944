"""Training configuration: one flat dataclass, mirrored one-to-one by the
config-file keys (key=value lines, # comments) and the CLI flags."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights


@dataclass
class TrainConfig:
    iters: int = 10000
    seed: int = 0
    # model
    knn_k: int = 3
    pe_bands: int = 4
    fusion: str = "variance"          # "variance" | "mean"
    color_mode: str = "learned"       # "learned" | "sh"
    sh_degree: int = 1
    geometry_view_dir: bool = True
    hidden_dim: int = 64
    # loss
    lambda1: float = 0.8
    lambda2: float = 0.2
    lambda3: float = 0.05
    lambda4: float = 0.067
    alpha1: float = 0.5
    alpha2: float = 0.5
    depth_weight_threshold: float = 0.5
    # optimizer
    lr_position: float = 1.6e-4       # scaled by scene extent
    lr_features: float = 2.5e-3
    lr_weights: float = 2.5e-3
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    # densification
    densify_start: int = 500
    densify_every: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    big_point_fraction: float = 0.1
    split_scale_shrink: float = 1.6
    clone_small_fraction: float = 0.01
    min_points: int = 16
    knn_refresh: int = 100
    # bookkeeping
    log_every: int = 50
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.fusion not in ("variance", "mean"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.color_mode not in ("learned", "sh"):
            raise ValueError(f"unknown color mode {self.color_mode!r}")
        if self.densify_start < 0:
            raise ValueError("densify_start must be nonnegative")
        # densify_start >= iters simply means the schedule never fires
        if self.densify_every < 1:
            raise ValueError("densify_every must be >= 1")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3,
                           self.lambda4, self.alpha1, self.alpha2)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return d


def _coerce(value: str, target):
    if isinstance(target, bool):
        low = value.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {value!r}")
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        return tuple(float(v) for v in value.split(","))
    return value


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Parse a flat key=value config file; overrides (CLI flags) win."""
    values: dict = {}
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    defaults = TrainConfig()
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(val.strip(), getattr(defaults, key))
    if overrides:
        for key, val in overrides.items():
            if val is not None:
                values[key] = val
    return TrainConfig(**values)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "background" in d:
        d["background"] = tuple(d["background"])
    return TrainConfig(**d)
