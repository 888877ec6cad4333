"""Desk-scale detector: conv backbone, per-level MoE, SDEP neck and a dense per-cell head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..config import ModelConfig
from ..moe import LEVELS, SparseMoE, ablation_bank
from ..neck import PyramidSet, SDEPNeck
from ..router import RouterDecision
from ..tensor import Module, ShapeError, Tensor
from .boxes import CellGrid, decode

# stride-2 3x3 conv with (top, bottom, left, right) padding that halves even extents exactly
DOWN_PAD = (1, 0, 1, 0)


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Log-compress intensities relative to the image mean, then standardize per image."""
    img = np.asarray(img, dtype=np.float64)
    axes = tuple(range(img.ndim - 2, img.ndim))
    rel = img / (img.mean(axis=axes, keepdims=True) + 1e-8)
    a = np.log1p(np.clip(rel, 0.0, None))
    a = (a - a.mean(axis=axes, keepdims=True)) / (a.std(axis=axes, keepdims=True) + 1e-6)
    return a.astype(T.get_dtype())


class Backbone(Module):
    """Stem (stride 2) then four stages of [3x3 stride-2 conv, 3x3 conv], each followed by ReLU."""

    def __init__(self, stem: int, channels: tuple[int, int, int, int], rng: np.random.Generator, in_channels: int = 1):
        self.stem = (T.init_uniform(rng, (stem, in_channels, 3, 3), 9 * in_channels), T.param(np.zeros(stem)))
        self.stages = []
        cin = stem
        for c in channels:
            self.stages.append([
                (T.init_uniform(rng, (c, cin, 3, 3), 9 * cin), T.param(np.zeros(c))),
                (T.init_uniform(rng, (c, c, 3, 3), 9 * c), T.param(np.zeros(c))),
            ])
            cin = c

    def __call__(self, image: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image extents must be divisible by 32, got {(h, w)}")
        x = T.relu(T.conv2d(image, *self.stem, stride=2, padding=DOWN_PAD))
        feats = []
        for (w1, b1), (w2, b2) in self.stages:
            x = T.relu(T.conv2d(x, w1, b1, stride=2, padding=DOWN_PAD))
            x = T.relu(T.conv2d(x, w2, b2, padding=1))
            feats.append(x)
        return tuple(feats)


class DenseHead(Module):
    """One 1x1 conv shared by all levels: objectness + (tx, ty, tw, th) per cell."""

    def __init__(self, d: int, rng: np.random.Generator, obj_bias: float = 0.0):
        self.w = T.init_uniform(rng, (5, d, 1, 1), d)
        self.b = T.param(np.array([obj_bias, 0.0, 0.0, 0.0, 0.0]))

    def __call__(self, pyr: PyramidSet) -> Tensor:
        outs = []
        for name in ("P3", "P4", "P5"):
            o = T.conv2d(pyr[name], self.w, self.b)
            outs.append(T.reshape(o, (o.shape[0], 5, -1)))
        return T.concat(outs, axis=2)


@dataclass
class ForwardOutput:
    raw: Tensor
    decisions: dict[str, RouterDecision]
    backbone: dict[str, Tensor]
    enhanced: dict[str, Tensor]
    pyramid: PyramidSet


@dataclass
class DetectionSet:
    boxes: np.ndarray  # (M, 4) normalized cxcywh
    scores: np.ndarray  # (M,)

    def __len__(self) -> int:
        return len(self.scores)


_LEVEL_FEATURE = {"P3": 1, "P4": 2, "P5": 3}


class Detector(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config.channels
        self.backbone = Backbone(config.stem_channels, c, rng)
        banks = ablation_bank(config.experts, config.k, config.tau, config.router)
        self.moe = {lvl: SparseMoE(c[_LEVEL_FEATURE[lvl]], banks[lvl], rng) for lvl in LEVELS if lvl in config.moe_levels}
        self.neck = SDEPNeck(c, config.d, config.fusion, rng)
        self.head = DenseHead(config.d, rng, config.obj_bias_init)
        self._grid = CellGrid.for_image(config.input_size, max_size_factor=config.max_size_factor)

    def named_parameters(self, prefix: str = ""):
        # config and grid carry no parameters
        for key in ("backbone", "moe", "neck", "head"):
            yield from T._walk(getattr(self, key), f"{prefix}{key}")

    @property
    def grid(self) -> CellGrid:
        return self._grid

    def forward(self, image: Tensor) -> ForwardOutput:
        f2, f3, f4, f5 = self.backbone(image)
        backbone = {"F2": f2, "F3": f3, "F4": f4, "F5": f5}
        enhanced = dict(backbone)
        decisions = {}
        for lvl, moe in self.moe.items():
            key = f"F{_LEVEL_FEATURE[lvl] + 2}"
            enhanced[key], decisions[lvl] = moe(backbone[key])
        pyr = self.neck(enhanced["F2"], enhanced["F3"], enhanced["F4"], enhanced["F5"])
        return ForwardOutput(self.head(pyr), decisions, backbone, enhanced, pyr)

    __call__ = forward

    def moe_stats(self):
        return {lvl: m.stats for lvl, m in self.moe.items()}

    def predict(self, images: np.ndarray, score_thresh: float = 0.5, batch: int = 50) -> list[DetectionSet]:
        """Threshold-only inference (no NMS). Keeps boxes with score strictly above ``score_thresh``."""
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None, None]
        elif images.ndim == 3:
            images = images[:, None]
        out = []
        with T.no_grad():
            for s in range(0, len(images), batch):
                x = Tensor(normalize_image(images[s : s + batch]))
                raw = self.forward(x).raw.data.transpose(0, 2, 1)
                logits, boxes = decode(raw, self._grid)
                scores = 1.0 / (1.0 + np.exp(-logits))
                for i in range(len(raw)):
                    keep = scores[i] > score_thresh
                    order = np.argsort(-scores[i][keep], kind="stable")
                    out.append(DetectionSet(boxes[i][keep][order], scores[i][keep][order]))
        return out


def backbone_forward(image: Tensor, params: Backbone) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    return params(image)


def head_forward(pyr: PyramidSet, params: DenseHead) -> Tensor:
    """Raw head output ``(N, 5, P)``: objectness logit then ``tx, ty, tw, th`` per cell."""
    return params(pyr)


def predict(images, checkpoint, score_thresh: float = 0.5) -> list[DetectionSet]:
    """Run a :class:`Detector` or a checkpoint path on raw intensity images."""
    if not isinstance(checkpoint, Detector):
        from .checkpoint import load_checkpoint

        checkpoint = load_checkpoint(checkpoint)
    return checkpoint.predict(images, score_thresh=score_thresh)
