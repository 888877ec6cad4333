"""Box decoding, IoU and their derivatives. Boxes are ``(cx, cy, w, h)`` normalized to [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CellGrid:
    """Cell offsets and strides for the flattened P3..P5 predictions."""

    gx: np.ndarray
    gy: np.ndarray
    stride: np.ndarray
    image_size: int
    max_size_factor: float = 4.0

    @classmethod
    def for_image(cls, image_size: int, strides=(8, 16, 32), max_size_factor: float = 4.0) -> "CellGrid":
        gx, gy, st = [], [], []
        for s in strides:
            n = image_size // s
            yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            gx.append(xx.ravel())
            gy.append(yy.ravel())
            st.append(np.full(n * n, s))
        return cls(np.concatenate(gx).astype(np.float64), np.concatenate(gy).astype(np.float64),
                   np.concatenate(st).astype(np.float64), image_size, max_size_factor)

    def __len__(self) -> int:
        return self.gx.size


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def decode(raw: np.ndarray, grid: CellGrid, with_jacobian: bool = False):
    """Raw head outputs ``(..., P, 5)`` -> objectness logits, boxes ``(..., P, 4)``.

    With ``with_jacobian`` also returns d(box)/d(raw[1:5]) as a ``(..., P, 4)`` diagonal.
    """
    raw = np.asarray(raw, dtype=np.float64)
    s = grid.stride
    size = float(grid.image_size)
    sx = _sigmoid(raw[..., 1])
    sy = _sigmoid(raw[..., 2])
    cx = (grid.gx + sx) * s / size
    cy = (grid.gy + sy) * s / size
    cap = grid.max_size_factor * s
    tw = np.clip(raw[..., 3], -10.0, 10.0)
    th = np.clip(raw[..., 4], -10.0, 10.0)
    ew = s * np.exp(tw)
    eh = s * np.exp(th)
    w = np.minimum(np.minimum(ew, cap) / size, 1.0)
    h = np.minimum(np.minimum(eh, cap) / size, 1.0)
    boxes = np.stack([cx, cy, w, h], axis=-1)
    if not with_jacobian:
        return raw[..., 0], boxes
    live_w = (ew < cap) & (ew / size < 1.0) & (np.abs(raw[..., 3]) < 10.0)
    live_h = (eh < cap) & (eh / size < 1.0) & (np.abs(raw[..., 4]) < 10.0)
    jac = np.stack([
        sx * (1 - sx) * s / size,
        sy * (1 - sy) * s / size,
        np.where(live_w, w, 0.0),
        np.where(live_h, h, 0.0),
    ], axis=-1)
    return raw[..., 0], boxes, jac


def to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def from_corners(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    wh = c[..., 2:] - c[..., :2]
    return np.concatenate([c[..., :2] + wh / 2, wh], axis=-1)


def iou(a, b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes (any consistent units)."""
    return float(pairwise_iou(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def iou_corners(a, b) -> float:
    """IoU of two ``(x1, y1, x2, y2)`` boxes."""
    return iou(from_corners(np.asarray(a, dtype=float)), from_corners(np.asarray(b, dtype=float)))


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(M, 4) x (K, 4) -> (M, K)`` IoU matrix for cxcywh boxes."""
    ca = to_corners(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    cb = to_corners(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    lo = np.maximum(ca[:, None, :2], cb[None, :, :2])
    hi = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou_and_grad(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise IoU of paired boxes ``a[i]``, ``b[i]`` and d(IoU)/d(a) in cxcywh."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw_raw = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    ih_raw = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    iw = np.clip(iw_raw, 0.0, None)
    ih = np.clip(ih_raw, 0.0, None)
    inter = iw * ih
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a + area_b - inter
    out = inter / union

    # d iw / d (ax1, ax2), d ih / d (ay1, ay2)
    on_w = iw_raw > 0
    on_h = ih_raw > 0
    diw_dx1 = -(on_w & (ax1 > bx1)).astype(float)
    diw_dx2 = (on_w & (ax2 < bx2)).astype(float)
    dih_dy1 = -(on_h & (ay1 > by1)).astype(float)
    dih_dy2 = (on_h & (ay2 < by2)).astype(float)
    d_inter = (union + inter) / union**2
    d_area = -inter / union**2

    di_dcx = ih * (diw_dx1 + diw_dx2)
    di_dw = ih * 0.5 * (diw_dx2 - diw_dx1)
    di_dcy = iw * (dih_dy1 + dih_dy2)
    di_dh = iw * 0.5 * (dih_dy2 - dih_dy1)
    grad = np.stack([
        d_inter * di_dcx,
        d_inter * di_dcy,
        d_inter * di_dw + d_area * a[:, 3],
        d_inter * di_dh + d_area * a[:, 2],
    ], axis=1)
    return out, grad
