from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .moe import LEVELS, canonical_bank_name
from .neck import FusionStrategy
from .router import RouterVariant


@dataclass
class ModelConfig:
    input_size: int = 64
    channels: tuple[int, int, int, int] = (8, 16, 32, 32)
    stem_channels: int = 8
    d: int = 32
    moe_levels: tuple[str, ...] = LEVELS
    fusion: str = "spd"
    router: str = "dual_branch"
    k: int = 2
    tau: float = 1.0
    experts: str = "full"
    max_size_factor: float = 4.0
    obj_bias_init: float = -2.0
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.moe_levels = tuple(self.moe_levels)
        if self.input_size % 32 or self.input_size < 32:
            raise ValueError(f"input size must be a positive multiple of 32, got {self.input_size}")
        if len(self.channels) != 4:
            raise ValueError("channels needs four entries (F2..F5)")
        bad = [lvl for lvl in self.moe_levels if lvl not in LEVELS]
        if bad:
            raise ValueError(f"unknown MoE levels {bad}")
        self.fusion = FusionStrategy(self.fusion).value
        self.router = RouterVariant.parse(self.router).value
        self.experts = canonical_bank_name(self.experts)
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 8
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 5.0, 2.0)
    balance_weight: float = 0.0
    eval_every: int = 1
    grad_clip: float | None = 10.0
