"""One-to-one set loss: Hungarian matching on a classification + L1 + IoU cost."""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor, record
from .boxes import CellGrid, decode, iou_and_grad, pairwise_iou
from .matching import hungarian_match

DEFAULT_WEIGHTS = (1.0, 5.0, 2.0)


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def matching_cost(obj: np.ndarray, boxes: np.ndarray, gt: np.ndarray, weights=DEFAULT_WEIGHTS) -> np.ndarray:
    """``(P, G)`` cost: ``l_cls * BCE(obj, 1) + l_l1 * |b - g|_1 + l_iou * (1 - IoU)``."""
    lc, l1, li = weights
    cls = _softplus(-obj)[:, None]
    dist = np.abs(boxes[:, None, :] - gt[None, :, :]).sum(axis=-1)
    return lc * cls + l1 * dist + li * (1.0 - pairwise_iou(boxes, gt))


def _image_loss(raw: np.ndarray, gt: np.ndarray, grid: CellGrid, weights):
    """Loss and d(loss)/d(raw) for one image; ``raw`` is ``(P, 5)``."""
    lc, l1, li = weights
    obj, boxes, jac = decode(raw, grid, with_jacobian=True)
    p = obj.size
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    target = np.zeros(p)
    grad = np.zeros((p, 5))
    box_loss = 0.0
    pairs: list[tuple[int, int]] = []
    if len(gt):
        pairs, _ = hungarian_match(matching_cost(obj, boxes, gt, weights))
        pi = np.array([a for a, _ in pairs])
        gi = np.array([b for _, b in pairs])
        target[pi] = 1.0
        diff = boxes[pi] - gt[gi]
        ious, diou = iou_and_grad(boxes[pi], gt[gi])
        norm = 1.0 / len(gt)
        box_loss = norm * float(l1 * np.abs(diff).sum() + li * (1.0 - ious).sum())
        dbox = norm * (l1 * np.sign(diff) - li * diou)
        grad[pi, 1:] = dbox * jac[pi]
    bce = _softplus(obj) - target * obj
    cls_loss = lc * float(bce.mean())
    grad[:, 0] = lc * (_sigmoid(obj) - target) / p
    return cls_loss + box_loss, grad, pairs


def set_loss(raw: Tensor, gts: list, grid: CellGrid, weights=DEFAULT_WEIGHTS) -> Tensor:
    """Mean over the batch of the matched set loss.

    ``raw`` is the head output ``(N, 5, P)``; ``gts[i]`` is a ``(G_i, 4)`` array of
    normalized boxes. Unmatched predictions only pay ``BCE(obj, 0)``; the
    classification term is averaged over predictions, box terms over ground truths.
    """
    data = np.asarray(raw.data, dtype=np.float64).transpose(0, 2, 1)
    n = data.shape[0]
    if len(gts) != n:
        raise ValueError(f"{len(gts)} ground-truth sets for a batch of {n}")
    total = 0.0
    grad = np.zeros_like(data)
    for i in range(n):
        li, gi, _ = _image_loss(data[i], gts[i], grid, weights)
        total += li
        grad[i] = gi
    out = np.asarray([total / n], dtype=raw.data.dtype)
    g_raw = (grad / n).transpose(0, 2, 1)

    def backward(g):
        return ((g.reshape(()) * g_raw).astype(raw.data.dtype),)

    return record("set_loss", out, (raw,), backward)


def assignments(raw: np.ndarray, gts: list, grid: CellGrid, weights=DEFAULT_WEIGHTS) -> list[list[tuple[int, int]]]:
    data = np.asarray(raw, dtype=np.float64).transpose(0, 2, 1)
    return [_image_loss(data[i], gts[i], grid, weights)[2] for i in range(data.shape[0])]
