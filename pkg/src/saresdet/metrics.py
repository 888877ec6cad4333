"""COCO-style detection metrics for a single class.

Detections are matched greedily in descending score order; each ground truth
is matched at most once. AP uses 101-point interpolation of the precision
envelope. ``ap_small`` restricts evaluation to ground truths below 32x32 pixels:
larger ground truths are ignored, as are unmatched detections that are large.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .detection.boxes import pairwise_iou

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.96, 0.05), 2)
RECALL_POINTS = np.arange(101) / 100.0
_RECALL_TOL = 1e-12  # recall 3/10 must reach the 0.30 point despite rounding
SMALL_AREA = 32.0**2


@dataclass
class EvalResult:
    map50: float
    map5095: float
    ap_small: float | None
    precision: float
    recall: float
    no_gt: bool = False

    def to_record(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def iou(a, b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes."""
    return float(pairwise_iou(np.asarray(a, float)[None], np.asarray(b, float)[None])[0, 0])


def _as_arrays(preds, gts):
    p_boxes, p_scores = [], []
    for p in preds:
        if hasattr(p, "boxes"):
            b, s = p.boxes, p.scores
        else:
            b, s = p
        p_boxes.append(np.asarray(b, dtype=np.float64).reshape(-1, 4))
        p_scores.append(np.asarray(s, dtype=np.float64).reshape(-1))
    g = [np.asarray(x, dtype=np.float64).reshape(-1, 4) for x in gts]
    if len(p_boxes) != len(g):
        raise ValueError(f"{len(p_boxes)} prediction sets for {len(g)} images")
    return p_boxes, p_scores, g


def _match_image(boxes, gt, gt_ignore, thresh):
    """Greedy matching of score-sorted ``boxes``; returns per-detection 1 (TP), 0 (FP), -1 (ignored)."""
    status = np.zeros(len(boxes), dtype=np.int64)
    if len(gt) == 0:
        return status, np.zeros(len(boxes), dtype=bool)
    ious = pairwise_iou(boxes, gt)
    taken = np.zeros(len(gt), dtype=bool)
    matched_ignored = np.zeros(len(boxes), dtype=bool)
    for i in range(len(boxes)):
        best, best_j = -1.0, -1
        for prefer_ignored in (False, True):
            for j in range(len(gt)):
                if taken[j] or gt_ignore[j] != prefer_ignored:
                    continue
                if ious[i, j] >= thresh and ious[i, j] > best:
                    best, best_j = ious[i, j], j
            if best_j >= 0:
                break
        if best_j >= 0:
            taken[best_j] = True
            if gt_ignore[best_j]:
                status[i] = -1
                matched_ignored[i] = True
            else:
                status[i] = 1
    return status, matched_ignored


def _interpolated_ap(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS - _RECALL_TOL, side="left")
    vals = np.zeros(RECALL_POINTS.size)
    hit = idx < recall.size
    vals[hit] = envelope[idx[hit]]
    return float(np.mean(vals))


def average_precision(preds, gts, iou_thresh: float = 0.5, image_size: float | None = None,
                      area_range: tuple[float, float] | None = None) -> float:
    """AP over a set of images at one IoU threshold.

    ``preds[i]`` is ``(boxes, scores)`` (or an object with those attributes) for
    image ``i`` and ``gts[i]`` its ground-truth boxes. With ``area_range`` (pixel
    areas, needs ``image_size``) only ground truths inside the range count.
    """
    p_boxes, p_scores, g = _as_arrays(preds, gts)
    scale = float(image_size) ** 2 if image_size else 1.0
    entries = []  # (score, image, status)
    n_gt = 0
    for img, (boxes, scores, gt) in enumerate(zip(p_boxes, p_scores, g)):
        if area_range is not None:
            areas = gt[:, 2] * gt[:, 3] * scale
            ignore = (areas < area_range[0]) | (areas >= area_range[1])
        else:
            ignore = np.zeros(len(gt), dtype=bool)
        n_gt += int((~ignore).sum())
        order = np.argsort(-scores, kind="stable")
        status, _ = _match_image(boxes[order], gt, ignore, iou_thresh)
        if area_range is not None:
            det_area = boxes[order, 2] * boxes[order, 3] * scale
            outside = (det_area < area_range[0]) | (det_area >= area_range[1])
            status = np.where((status == 0) & outside, -1, status)
        entries.extend(zip(scores[order], [img] * len(order), status))
    if not entries:
        return 0.0
    s = np.array([e[0] for e in entries])
    st = np.array([e[2] for e in entries])
    order = np.argsort(-s, kind="stable")
    st = st[order]
    st = st[st >= 0]
    return _interpolated_ap((st == 1).astype(float), (st == 0).astype(float), n_gt)


def precision_recall(preds, gts, iou_thresh: float = 0.5, score_thresh: float = 0.5) -> tuple[float, float]:
    p_boxes, p_scores, g = _as_arrays(preds, gts)
    tp = n_det = n_gt = 0
    for boxes, scores, gt in zip(p_boxes, p_scores, g):
        keep = scores > score_thresh
        order = np.argsort(-scores[keep], kind="stable")
        status, _ = _match_image(boxes[keep][order], gt, np.zeros(len(gt), dtype=bool), iou_thresh)
        tp += int((status == 1).sum())
        n_det += int(keep.sum())
        n_gt += len(gt)
    precision = tp / n_det if n_det else 0.0
    recall = tp / n_gt if n_gt else 0.0
    return precision, recall


def coco_map(preds, gts, image_size: float = 64.0) -> EvalResult:
    """mAP50, mAP50:95, AP_small (``None`` when no small ground truth exists), P and R."""
    _, _, g = _as_arrays(preds, gts)
    n_gt = sum(len(x) for x in g)
    aps = [average_precision(preds, gts, t) for t in IOU_THRESHOLDS]
    areas = np.concatenate([x[:, 2] * x[:, 3] for x in g]) * float(image_size) ** 2 if n_gt else np.zeros(0)
    if np.any(areas < SMALL_AREA):
        ap_small = float(np.mean([
            average_precision(preds, gts, t, image_size=image_size, area_range=(0.0, SMALL_AREA))
            for t in IOU_THRESHOLDS
        ]))
    else:
        ap_small = None
    precision, recall = precision_recall(preds, gts)
    return EvalResult(
        map50=aps[0],
        map5095=float(np.mean(aps)),
        ap_small=ap_small,
        precision=precision,
        recall=recall,
        no_gt=n_gt == 0,
    )
