"""The five expert families. Each maps ``(N, C, H, W)`` to the same shape and is residual:
zeroing its final projection makes it the exact identity."""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as T
from .spectral import band_masks, haar_dwt2, haar_idwt2, log_magnitude, soft_threshold, spectral_gain_filter, WaveletSubbands
from .tensor import Module, ShapeError, Tensor


class ExpertKind(str, Enum):
    SHARED = "shared"
    WAVELET = "wavelet"
    SPATIAL = "spatial"
    FREQUENCY = "frequency"
    HYBRID = "hybrid"


FREQ_BANDS = 4
THRESHOLD_INIT = -3.0  # softplus(-3) ~= 0.049


def _conv1x1(rng, cin: int, cout: int) -> tuple[Tensor, Tensor]:
    return T.init_uniform(rng, (cout, cin, 1, 1), cin), T.param(np.zeros(cout))


class SharedExpert(Module):
    """3x3 conv + ReLU, gated by channel attention over pooled and spectral statistics."""

    kind = ExpertKind.SHARED

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        if channels % reduction:
            raise ShapeError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.conv_w = T.init_uniform(rng, (channels, channels, 3, 3), channels * 9)
        self.conv_b = T.param(np.zeros(channels))
        self.fc1_w = T.init_uniform(rng, (hidden, 2 * channels), 2 * channels)
        self.fc1_b = T.param(np.zeros(hidden))
        self.fc2_w = T.init_uniform(rng, (channels, hidden), hidden)
        self.fc2_b = T.param(np.zeros(channels))

    def gates(self, h: Tensor) -> Tensor:
        pooled = T.flatten(T.global_avg_pool(h))
        spectral = T.flatten(T.global_avg_pool(log_magnitude(h)))
        a = T.relu(T.linear(T.concat([pooled, spectral], axis=1), self.fc1_w, self.fc1_b))
        return T.sigmoid(T.linear(a, self.fc2_w, self.fc2_b))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(T.conv2d(x, self.conv_w, self.conv_b, padding=1))
        return T.add(x, T.mul(h, self.gates(h)))

    def merge_params(self) -> list[Tensor]:
        return [self.conv_w, self.conv_b]


class WaveletCore(Module):
    """Haar split, soft-thresholded and rescaled details, rescaled approximation, inverse Haar."""

    def __init__(self, channels: int):
        self.scales = T.param(np.ones((4, channels)))
        self.threshold_pre = T.param(np.full((3, channels), THRESHOLD_INIT))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"wavelet expert needs even H, W, got {x.shape[2:]}")
        sb = haar_dwt2(x)
        thresholds = T.softplus(self.threshold_pre)
        bands = [T.mul(sb.LL, T.index(self.scales, 0))]
        for i, band in enumerate((sb.LH, sb.HL, sb.HH)):
            t = T.index(thresholds, i)
            bands.append(T.mul(soft_threshold(band, t), T.index(self.scales, i + 1)))
        return haar_idwt2(WaveletSubbands(*bands))


class FrequencyCore(Module):
    """Per-band, per-channel gains on the 2-D spectrum (4 radial bands)."""

    def __init__(self, channels: int, bands: int = FREQ_BANDS):
        self.bands = bands
        self.gains = T.param(np.ones((bands, channels)))

    def __call__(self, x: Tensor) -> Tensor:
        return spectral_gain_filter(x, self.gains, band_masks(x.shape[2], x.shape[3], self.bands))


class WaveletExpert(Module):
    kind = ExpertKind.WAVELET

    def __init__(self, channels: int, rng: np.random.Generator):
        self.core = WaveletCore(channels)
        self.merge_w, self.merge_b = _conv1x1(rng, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, T.conv2d(self.core(x), self.merge_w, self.merge_b))

    def merge_params(self) -> list[Tensor]:
        return [self.merge_w, self.merge_b]


class SpatialExpert(Module):
    """Ghost module: half the channels from a 1x1 conv, the other half from a cheap depthwise 3x3."""

    kind = ExpertKind.SPATIAL

    def __init__(self, channels: int, rng: np.random.Generator):
        if channels % 2:
            raise ShapeError(f"spatial expert needs an even channel count, got {channels}")
        half = channels // 2
        self.primary_w, self.primary_b = _conv1x1(rng, channels, half)
        self.cheap_w = T.init_uniform(rng, (half, 1, 3, 3), 9)
        self.cheap_b = T.param(np.zeros(half))
        self.merge_w, self.merge_b = _conv1x1(rng, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        primary = T.relu(T.conv2d(x, self.primary_w, self.primary_b))
        ghost = T.relu(T.depthwise_conv2d(primary, self.cheap_w, self.cheap_b, padding=1))
        return T.add(x, T.conv2d(T.concat([primary, ghost], axis=1), self.merge_w, self.merge_b))

    def merge_params(self) -> list[Tensor]:
        return [self.merge_w, self.merge_b]


class FrequencyExpert(Module):
    kind = ExpertKind.FREQUENCY

    def __init__(self, channels: int, rng: np.random.Generator):
        self.core = FrequencyCore(channels)
        self.merge_w, self.merge_b = _conv1x1(rng, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, T.conv2d(self.core(x), self.merge_w, self.merge_b))

    def merge_params(self) -> list[Tensor]:
        return [self.merge_w, self.merge_b]


class HybridExpert(Module):
    """Average of a frequency branch and a wavelet branch, then a 1x1 merge."""

    kind = ExpertKind.HYBRID

    def __init__(self, channels: int, rng: np.random.Generator):
        self.freq = FrequencyCore(channels)
        self.wave = WaveletCore(channels)
        self.merge_w, self.merge_b = _conv1x1(rng, channels, channels)

    def core(self, x: Tensor) -> Tensor:
        return T.scale(T.add(self.freq(x), self.wave(x)), 0.5)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, T.conv2d(self.core(x), self.merge_w, self.merge_b))

    def merge_params(self) -> list[Tensor]:
        return [self.merge_w, self.merge_b]


_EXPERTS = {
    ExpertKind.SHARED: SharedExpert,
    ExpertKind.WAVELET: WaveletExpert,
    ExpertKind.SPATIAL: SpatialExpert,
    ExpertKind.FREQUENCY: FrequencyExpert,
    ExpertKind.HYBRID: HybridExpert,
}


def make_expert(kind, channels: int, rng: np.random.Generator) -> Module:
    return _EXPERTS[ExpertKind(kind)](channels, rng)


def zero_merge(expert: Module) -> None:
    """Zero an expert's final projection so it collapses to the identity."""
    for p in expert.merge_params():
        p.data[...] = 0.0


def shared_expert(x: Tensor, p: SharedExpert) -> Tensor:
    return p(x)


def wavelet_expert(x: Tensor, p: WaveletExpert) -> Tensor:
    return p(x)


def spatial_expert(x: Tensor, p: SpatialExpert) -> Tensor:
    return p(x)


def frequency_expert(x: Tensor, p: FrequencyExpert) -> Tensor:
    return p(x)


def hybrid_expert(x: Tensor, p: HybridExpert) -> Tensor:
    return p(x)
