import numpy as np
import pytest
from hypothesis import given, strategies as st

from saresdet.detection.boxes import iou_corners
from saresdet.metrics import IOU_THRESHOLDS, average_precision, coco_map, iou, precision_recall

from oracles import naive_ap

G = np.array([[0.5, 0.5, 0.2, 0.2]])


def test_iou_examples():
    assert iou(G[0], G[0]) == pytest.approx(1.0)
    assert iou([0.1, 0.1, 0.1, 0.1], [0.9, 0.9, 0.1, 0.1]) == 0.0
    assert iou_corners([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7)


class TestHandCases:
    def test_perfect(self):
        assert average_precision([(G, [0.9])], [G]) == pytest.approx(1.0, abs=1e-9)

    def test_fp_ranked_above_tp(self):
        preds = [(np.array([[0.1, 0.1, 0.05, 0.05], G[0]]), [0.9, 0.8])]
        assert average_precision(preds, [G]) == pytest.approx(0.5, abs=1e-9)

    def test_no_predictions(self):
        assert average_precision([(np.zeros((0, 4)), [])], [G]) == 0.0

    def test_duplicate_is_false_positive(self):
        preds = [(np.array([G[0], G[0]]), [0.9, 0.8])]
        p, r = precision_recall(preds, [G], score_thresh=0.5)
        assert (p, r) == (0.5, 1.0)

    def test_perfect_detector_all_ones(self):
        gts = [np.array([[0.3, 0.3, 0.1, 0.1], [0.7, 0.7, 0.2, 0.1]]), np.array([[0.5, 0.5, 0.3, 0.3]])]
        res = coco_map([(g, np.full(len(g), 0.9)) for g in gts], gts)
        assert (res.map50, res.map5095, res.ap_small, res.precision, res.recall) == pytest.approx((1, 1, 1, 1, 1))

    def test_jitter_to_iou_near_06(self):
        # widening a box by factor f gives IoU 1/f; IoU 0.62 passes 0.50..0.60 and fails 0.65+
        gts = [np.array([[0.5, 0.5, 0.2, 0.2]]) for _ in range(4)]
        preds = [(np.array([[0.5, 0.5, 0.2 / 0.62, 0.2]]), [0.9]) for _ in range(4)]
        res = coco_map(preds, gts)
        aps = [average_precision(preds, gts, t) for t in IOU_THRESHOLDS]
        assert res.map50 == 1.0 and aps[:3] == [1.0, 1.0, 1.0] and all(a == 0 for a in aps[3:])
        assert res.map5095 == pytest.approx(0.3, abs=1e-9)
        assert res.map5095 == pytest.approx(np.mean(aps), abs=1e-12)

    def test_no_small_gt_is_absent(self):
        big = [np.array([[0.5, 0.5, 0.8, 0.8]])]
        assert coco_map([(big[0], [0.9])], big).ap_small is None

    def test_no_gt_flag(self):
        res = coco_map([(G, [0.9])], [np.zeros((0, 4))])
        assert res.no_gt and res.map50 == 0.0

    def test_ap_small_ignores_large(self):
        gts = [np.array([[0.2, 0.2, 0.1, 0.1], [0.6, 0.6, 0.8, 0.8]])]
        preds = [(np.array([[0.6, 0.6, 0.8, 0.8], [0.2, 0.2, 0.1, 0.1]]), [0.95, 0.9])]
        assert coco_map(preds, gts).ap_small == pytest.approx(1.0)


def random_scene(rng, n_img):
    preds, gts = [], []
    for _ in range(n_img):
        k = rng.integers(0, 4)
        g = np.column_stack([rng.uniform(0.1, 0.9, (k, 2)), rng.uniform(0.03, 0.7, (k, 2))])
        p = []
        for b in g:
            if rng.random() < 0.8:
                p.append(b + rng.normal(scale=0.02, size=4) * [1, 1, 0.5, 0.5])
        for _ in range(rng.integers(0, 3)):
            p.append([*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.03, 0.5, 2)])
        p = np.abs(np.array(p).reshape(-1, 4)) + [0, 0, 1e-3, 1e-3]
        # coarse scores create ties across images
        preds.append((p, np.round(rng.uniform(0, 1, len(p)), 1)))
        gts.append(g)
    return preds, gts


@pytest.mark.parametrize("seed", range(100))
def test_coco_map_matches_naive_evaluator(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_scene(rng, rng.integers(1, 5))
    res = coco_map(preds, gts)
    naive = [naive_ap(preds, gts, t) for t in IOU_THRESHOLDS]
    assert res.map50 == pytest.approx(naive[0], abs=1e-9)
    assert res.map5095 == pytest.approx(np.mean(naive), abs=1e-9)
    if res.ap_small is not None:
        small = np.mean([naive_ap(preds, gts, t, small_only=True) for t in IOU_THRESHOLDS])
        assert res.ap_small == pytest.approx(small, abs=1e-9)
    for v in (res.map50, res.map5095, res.precision, res.recall):
        assert 0.0 <= v <= 1.0


@given(st.integers(0, 10**6))
def test_ap_invariant_to_monotone_score_rescaling(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_scene(rng, 3)
    warped = [(b, np.exp(3 * s) + 7) for b, s in preds]
    assert average_precision(preds, gts) == pytest.approx(average_precision(warped, gts), abs=1e-12)
