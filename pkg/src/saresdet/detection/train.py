"""AdamW training loop for the desk-scale detector."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import tensor as T
from ..config import ModelConfig, TrainConfig
from ..metrics import EvalResult, coco_map
from ..router import importance_penalty
from ..tensor import NonFiniteError, Tape, Tensor
from .loss import set_loss
from .model import Detector, normalize_image

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Raw intensity images ``(N, 1, H, W)`` and per-image normalized cxcywh boxes."""

    images: np.ndarray
    boxes: list[np.ndarray]
    names: list[str] | None = None

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        names = [self.names[i] for i in idx] if self.names else None
        return Dataset(self.images[idx], [self.boxes[i] for i in idx], names)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, weight_decay: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * self.weight_decay * p.data - self.lr * update).astype(p.data.dtype)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None)))
    if norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= k
    return norm


def loss_on_batch(model: Detector, images: np.ndarray, boxes: list, tcfg: TrainConfig) -> tuple[Tensor, Tape]:
    tape = Tape()
    with tape:
        out = model.forward(Tensor(normalize_image(images)))
        if not np.all(np.isfinite(out.raw.data)):
            _raise_non_finite(tape, out.raw, "head output")
        loss = set_loss(out.raw, boxes, model.grid, tcfg.loss_weights)
        if tcfg.balance_weight > 0:
            for dec in out.decisions.values():
                if dec.prob_tensor is not None:
                    loss = T.add(loss, T.scale(importance_penalty(dec.prob_tensor), tcfg.balance_weight))
    return loss, tape


def _raise_non_finite(tape: Tape, value: Tensor, what: str = "loss") -> None:
    node = tape.first_non_finite()
    where = f"output of {node.op} (node {tape.nodes.index(node)})" if node else what
    raise NonFiniteError(f"non-finite {what}; first non-finite tensor: {where}")


def evaluate(model: Detector, data: Dataset) -> EvalResult:
    dets = model.predict(data.images, score_thresh=-1.0)
    return coco_map(dets, data.boxes, image_size=data.image_size)


def train(data: Dataset, config: ModelConfig, tcfg: TrainConfig | None = None, val: Dataset | None = None,
          emit: Callable[[dict], None] | None = None, model: Detector | None = None) -> tuple[Detector, list[dict]]:
    """Train a detector; emits one record ``{epoch, loss, map50, map5095}`` per epoch."""
    tcfg = tcfg or TrainConfig()
    if len(data) == 0:
        raise ValueError("training set is empty")
    if data.image_size != config.input_size:
        raise ValueError(f"dataset images are {data.image_size}px but the model expects {config.input_size}px")
    model = model or Detector(config)
    params = model.parameters()
    opt = AdamW(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(data))
        losses = []
        for s in range(0, len(order), tcfg.batch):
            idx = order[s : s + tcfg.batch]
            model.zero_grad()
            loss, tape = loss_on_batch(model, data.images[idx], [data.boxes[i] for i in idx], tcfg)
            if not np.isfinite(loss.item()):
                _raise_non_finite(tape, loss)
            tape.backward(loss)
            if tcfg.grad_clip:
                clip_grad_norm(params, tcfg.grad_clip)
            opt.step()
            losses.append(loss.item())
        rec = {"epoch": epoch, "loss": float(np.mean(losses)), "map50": None, "map5095": None}
        if val is not None and len(val) and (epoch % tcfg.eval_every == 0 or epoch == tcfg.epochs):
            res = evaluate(model, val)
            rec["map50"], rec["map5095"] = res.map50, res.map5095
        history.append(rec)
        if emit is not None:
            emit(rec)
        log.debug("epoch %d loss %.4f", epoch, rec["loss"])
    return model, history


def stdout_emitter(stream=None) -> Callable[[dict], None]:
    stream = stream or sys.stdout

    def emit(rec: dict) -> None:
        stream.write(json.dumps(rec) + "\n")
        stream.flush()

    return emit
