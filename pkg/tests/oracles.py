"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import itertools
from decimal import Decimal, getcontext

import numpy as np


def fd_grad(f, arr: np.ndarray, h: float) -> np.ndarray:
    """Plain central differences over a float64 copy; ``f`` maps an ndarray to a float."""
    x = np.array(arr, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def softmax_decimal(logits, tau=1.0, digits=40) -> list[float]:
    getcontext().prec = digits
    z = [Decimal(repr(float(v))) / Decimal(repr(float(tau))) for v in logits]
    e = [v.exp() for v in z]
    s = sum(e)
    return [float(v / s) for v in e]


def brute_force_assignment(cost: np.ndarray) -> float:
    """Minimum total over every injective map of ground truths (columns) into predictions (rows)."""
    n_pred, n_gt = cost.shape
    best = np.inf
    for rows in itertools.permutations(range(n_pred), n_gt):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return best


def naive_dft2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    out = np.zeros(x.shape, dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            phase = np.exp(-2j * np.pi * (u * np.arange(h)[:, None] / h + v * np.arange(w)[None, :] / w))
            out[..., u, v] = (x * phase).sum(axis=(-2, -1))
    return out


def box_iou(a, b) -> float:
    """IoU of two (cx, cy, w, h) boxes, written from scratch."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def naive_ap(preds, gts, thresh: float, small_only: bool = False, image_size: float = 64.0) -> float:
    """Slow single-threshold AP: per-image greedy matching, then a 101-point envelope.

    ``preds[i] = (boxes, scores)``. With ``small_only`` ground truths of pixel area
    >= 32^2 are ignored, as are unmatched detections that are themselves large.
    """
    records = []  # (score, kind) with kind in {"tp", "fp", "skip"}
    n_gt = 0
    for (boxes, scores), gt in zip(preds, gts):
        gt = [tuple(g) for g in np.asarray(gt, float).reshape(-1, 4)]
        large = [g[2] * g[3] * image_size**2 >= 1024 if small_only else False for g in gt]
        n_gt += sum(1 for L in large if not L)
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        used = [False] * len(gt)
        for i in order:
            b = boxes[i]
            choice = None
            for want_large in (False, True):
                best = -1.0
                for j, g in enumerate(gt):
                    if used[j] or large[j] != want_large:
                        continue
                    v = box_iou(b, g)
                    if v >= thresh and v > best:
                        best, choice = v, j
                if choice is not None:
                    break
            if choice is not None:
                used[choice] = True
                records.append((scores[i], "skip" if large[choice] else "tp"))
            elif small_only and b[2] * b[3] * image_size**2 >= 1024:
                records.append((scores[i], "skip"))
            else:
                records.append((scores[i], "fp"))
    if n_gt == 0:
        return 0.0
    # stable global sort by score, ties in insertion order
    records = [r for _, r in sorted(enumerate(records), key=lambda t: (-t[1][0], t[0]))]
    tp = fp = 0
    curve = []
    for _, kind in records:
        if kind == "skip":
            continue
        if kind == "tp":
            tp += 1
        else:
            fp += 1
        curve.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100
        total += max((p for rec, p in curve if rec >= r - 1e-12), default=0.0)
    return total / 101
