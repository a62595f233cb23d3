"""Training / architecture configuration and its JSON schema.

A config file is a flat JSON object whose keys are :class:`TrainConfig`
field names; unknown keys are rejected.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .geometry import PyramidSpec

REFERENCE_BATCH = 16
REFERENCE_LR = 0.01
# training image scale the size-based heuristic's canonical 224 px refers to
REFERENCE_IMAGE_SIZE = 800.0


@dataclass
class TrainConfig:
    # data / architecture
    num_classes: int = 3
    image_size: int = 128
    l_min: int = 3
    l_max: int = 5
    backbone_channels: tuple = (8, 16, 32, 32, 32)
    width: int = 32
    branches: str = "af"  # "af", "ab" or "both"
    selection: str = "online"  # "online" or "heuristic"
    anchor_base: float = 2.0
    # optimization
    iterations: int = 2000
    batch_size: int = 8
    lr: float | None = None  # None: 0.01 rescaled linearly from batch 16
    lr_steps: tuple = (2 / 3, 8 / 9)
    warmup_iters: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    af_weight: float = 0.5
    flip: bool = True
    seed: int = 0
    dtype: str = "float32"
    # initialization
    prior: float = 0.01
    reg_bias: float = 0.1
    init_std: float = 0.01
    # anchor-free supervision
    S: float = 4.0
    eps_e: float = 0.2
    eps_i: float = 0.5
    alpha: float = 0.25
    gamma: float = 2.0
    heuristic_l0: int = 5
    heuristic_canonical: float | None = None  # None: 224 scaled by image_size / 800
    # anchor matching
    fg_thresh: float = 0.5
    bg_thresh: float = 0.4

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        self.lr_steps = tuple(self.lr_steps)
        if self.branches not in ("af", "ab", "both"):
            raise ValueError(f"branches must be af, ab or both, got {self.branches!r}")
        if self.selection not in ("online", "heuristic"):
            raise ValueError(f"selection must be online or heuristic, got {self.selection!r}")
        if len(self.backbone_channels) != 5:
            raise ValueError("backbone_channels needs 5 entries (strides 2 through 32)")
        if self.l_min != 3 or self.l_max < 3:
            raise ValueError("the toy backbone provides levels starting at 3")
        if self.image_size % 2 ** self.l_max:
            raise ValueError(f"image_size {self.image_size} not divisible by 2^{self.l_max}")
        if not 0 < self.prior < 1:
            raise ValueError(f"prior must be in (0, 1), got {self.prior}")
        for name in ("iterations", "batch_size", "num_classes", "width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        PyramidSpec(self.l_min, self.l_max)

    @property
    def pyramid(self) -> PyramidSpec:
        return PyramidSpec(self.l_min, self.l_max)

    @property
    def use_af(self) -> bool:
        return self.branches in ("af", "both")

    @property
    def use_ab(self) -> bool:
        return self.branches in ("ab", "both")

    @property
    def base_lr(self) -> float:
        return self.lr if self.lr is not None else REFERENCE_LR * self.batch_size / REFERENCE_BATCH

    @property
    def canonical_size(self) -> float:
        if self.heuristic_canonical is not None:
            return self.heuristic_canonical
        return 224.0 * self.image_size / REFERENCE_IMAGE_SIZE

    def lr_at(self, iteration: int) -> float:
        """Step schedule: divide by 10 at each ``lr_steps`` fraction, linear warmup first."""
        lr = self.base_lr
        for frac in self.lr_steps:
            if iteration >= math.floor(frac * self.iterations):
                lr /= 10
        if iteration < self.warmup_iters:
            lr *= (iteration + 1) / self.warmup_iters
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["lr_steps"] = list(self.lr_steps)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


def load_config(path) -> TrainConfig:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return TrainConfig.from_dict(data)


def save_config(config: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
