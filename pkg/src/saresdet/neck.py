"""Space-to-depth enhancement pyramid: lossless SPD injection of stride-4 features into P3,
a top-down pyramid, and the lossy fusion baselines."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Module, ShapeError, Tensor, record


class FusionStrategy(str, Enum):
    NONE = "none"
    STRIDED = "strided"
    STRIP = "strip"
    SPD = "spd"


def spd(x: Tensor) -> Tensor:
    """``(N, C, H, W) -> (N, 4C, H/2, W/2)``; channel ``b*C + c`` holds offset ``b = 2*dy + dx``."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spd needs even H and W, got {(h, w)}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 3, 5, 1, 2, 4).reshape(n, 4 * c, h // 2, w // 2)

    def backward(g):
        return (_spd_inverse_array(g),)

    return record("spd", np.ascontiguousarray(out), (x,), backward)


def _spd_inverse_array(y: np.ndarray) -> np.ndarray:
    n, c4, h, w = y.shape
    if c4 % 4:
        raise ShapeError(f"spd_inverse needs channels divisible by 4, got {c4}")
    c = c4 // 4
    return np.ascontiguousarray(y.reshape(n, 2, 2, c, h, w).transpose(0, 3, 4, 1, 5, 2).reshape(n, c, 2 * h, 2 * w))


def spd_inverse(y: Tensor) -> Tensor:
    out = _spd_inverse_array(y.data)
    return record("spd_inverse", out, (y,), lambda g: (spd(Tensor(g)).data,))


@dataclass
class PyramidSet:
    features: dict[str, Tensor]
    strides: dict[str, int]

    def __getitem__(self, name: str) -> Tensor:
        return self.features[name]

    @property
    def levels(self) -> list[str]:
        return [k for k in ("P3", "P4", "P5") if k in self.features]


class P2Fusion(Module):
    """Injects stride-4 features into the stride-8 level using one fusion strategy."""

    def __init__(self, c2: int, d: int, strategy, rng: np.random.Generator):
        self.strategy = FusionStrategy(strategy)
        s = self.strategy
        if s is FusionStrategy.SPD:
            self.proj_w = T.init_uniform(rng, (d, 4 * c2, 1, 1), 4 * c2)
            self.proj_b = T.param(np.zeros(d))
        elif s is FusionStrategy.STRIDED:
            self.proj_w = T.init_uniform(rng, (d, c2, 3, 3), 9 * c2)
            self.proj_b = T.param(np.zeros(d))
        elif s is FusionStrategy.STRIP:
            self.strip_h = T.init_uniform(rng, (c2, 1, 1, 7), 7)
            self.strip_v = T.init_uniform(rng, (c2, 1, 7, 1), 7)
            # 2x2 stride-2 projection: a 1x1 kernel cannot halve even extents exactly
            self.proj_w = T.init_uniform(rng, (d, c2, 2, 2), 4 * c2)
            self.proj_b = T.param(np.zeros(d))

    def __call__(self, f2: Tensor, f3: Tensor) -> Tensor:
        if f2.shape[2] != 2 * f3.shape[2] or f2.shape[3] != 2 * f3.shape[3]:
            raise ShapeError(f"extent: F2 {f2.shape[2:]} must be exactly twice F3 {f3.shape[2:]}")
        s = self.strategy
        if s is FusionStrategy.NONE:
            return f3
        if s is FusionStrategy.SPD:
            injected = T.conv2d(spd(f2), self.proj_w, self.proj_b)
        elif s is FusionStrategy.STRIDED:
            injected = T.conv2d(f2, self.proj_w, self.proj_b, stride=2, padding=(1, 0, 1, 0))
        else:
            h = T.depthwise_conv2d(f2, self.strip_h, padding=(0, 0, 3, 3))
            h = T.depthwise_conv2d(h, self.strip_v, padding=(3, 3, 0, 0))
            injected = T.conv2d(h, self.proj_w, self.proj_b, stride=2)
        return T.add(injected, f3)


def fuse_p2(f2: Tensor, f3: Tensor, strategy, params: P2Fusion) -> Tensor:
    if FusionStrategy(strategy) is not params.strategy:
        raise ValueError(f"fusion parameters were built for {params.strategy.value}")
    return params(f2, f3)


class SDEPNeck(Module):
    """Lateral 1x1 projections, top-down sums, P2 fusion at P3, 3x3 smoothing per level."""

    def __init__(self, channels: tuple[int, int, int, int], d: int, strategy, rng: np.random.Generator):
        c2, c3, c4, c5 = channels
        self.d = d
        self.lateral = {}
        for name, c in (("P3", c3), ("P4", c4), ("P5", c5)):
            self.lateral[name] = (T.init_uniform(rng, (d, c, 1, 1), c), T.param(np.zeros(d)))
        self.smooth = {name: (T.init_uniform(rng, (d, d, 3, 3), 9 * d), T.param(np.zeros(d))) for name in ("P3", "P4", "P5")}
        self.fusion = P2Fusion(c2, d, strategy, rng)

    @property
    def strategy(self) -> FusionStrategy:
        return self.fusion.strategy

    def __call__(self, f2: Tensor, f3: Tensor, f4: Tensor, f5: Tensor) -> PyramidSet:
        lat = {name: T.conv2d(f, *self.lateral[name]) for name, f in (("P3", f3), ("P4", f4), ("P5", f5))}
        p5 = lat["P5"]
        p4 = T.add(lat["P4"], T.upsample_nearest2x(p5))
        p3 = self.fusion(f2, T.add(lat["P3"], T.upsample_nearest2x(p4)))
        feats = {}
        for name, p in (("P3", p3), ("P4", p4), ("P5", p5)):
            w, b = self.smooth[name]
            feats[name] = T.conv2d(p, w, b, padding=1)
        return PyramidSet(feats, {"P3": 8, "P4": 16, "P5": 32})


def build_pyramid(f2: Tensor, f3: Tensor, f4: Tensor, f5: Tensor, strategy, params: SDEPNeck) -> PyramidSet:
    if FusionStrategy(strategy) is not params.strategy:
        raise ValueError(f"neck parameters were built for {params.strategy.value}")
    return params(f2, f3, f4, f5)
