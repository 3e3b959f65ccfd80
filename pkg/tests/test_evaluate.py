import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codaf import oracle
from codaf.evaluate import COCO_THRESHOLDS, class_ap, evaluate_detections, iou_matrix
from codaf.model import Detection

A = (0.0, 0.0, 10.0, 10.0)
B = (20.0, 20.0, 30.0, 30.0)


def random_case(seed, n_img=4, n_gt=6, n_det=12):
    rng = np.random.default_rng(seed)
    gts = []
    for _ in range(n_gt):
        x, y = rng.uniform(0, 50, 2)
        w, h = rng.uniform(5, 20, 2)
        gts.append((int(rng.integers(n_img)), (x, y, x + w, y + h)))
    dets = []
    for _ in range(n_det):
        if gts and rng.random() < 0.7:
            img, (x0, y0, x1, y1) = gts[int(rng.integers(len(gts)))]
            j = rng.normal(0, 2.5, 4)
            box = (x0 + j[0], y0 + j[1], max(x1 + j[2], x0 + j[0] + 1), max(y1 + j[3], y0 + j[1] + 1))
        else:
            img = int(rng.integers(n_img))
            x, y = rng.uniform(0, 50, 2)
            box = (x, y, x + 10, y + 10)
        # coarse scores so ties occur
        dets.append((img, float(np.round(rng.random(), 1)), box))
    return dets, gts


class TestIoU:
    def test_basic(self):
        m = iou_matrix(np.array([A]), np.array([A, B, (5.0, 0.0, 15.0, 10.0)]))
        np.testing.assert_allclose(m[0], [1.0, 0.0, 1 / 3])

    def test_empty(self):
        assert iou_matrix(np.zeros((0, 4)), np.array([A])).shape == (0, 1)


class TestClassAP:
    def test_hand_built_curve(self):
        gts = [(0, A), (0, B)]
        dets = [(0, 0.9, A), (0, 0.8, (50.0, 50.0, 60.0, 60.0)), (0, 0.7, B)]
        assert class_ap(dets, gts, [0.5])[0] == pytest.approx(0.8333333, abs=1e-6)
        assert oracle.naive_ap(dets, gts, 0.5) == pytest.approx(0.8333333, abs=1e-6)

    def test_perfect(self):
        gts = [(0, A), (1, B)]
        dets = [(0, 1.0, A), (1, 1.0, B)]
        assert class_ap(dets, gts, COCO_THRESHOLDS) == [1.0] * len(COCO_THRESHOLDS)

    def test_empty_predictions(self):
        assert class_ap([], [(0, A)], [0.5]) == [0.0]

    def test_duplicate_is_false_positive(self):
        gts = [(0, A)]
        dets = [(0, 0.9, A), (0, 0.8, A)]
        assert class_ap(dets, gts, [0.5])[0] == 1.0
        # duplicate ranked above the only match at a stricter threshold
        assert class_ap([(0, 0.9, (0.0, 0.0, 10.0, 12.0)), (0, 0.8, A)], gts, [0.9])[0] == pytest.approx(0.5)

    def test_other_image_does_not_match(self):
        assert class_ap([(1, 0.9, A)], [(0, A)], [0.5]) == [0.0]

    @pytest.mark.parametrize("seed", range(60))
    def test_matches_naive(self, seed):
        dets, gts = random_case(seed)
        for thr in (0.5, 0.75):
            assert class_ap(dets, gts, [thr])[0] == pytest.approx(oracle.naive_ap(dets, gts, thr), abs=1e-6)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_bounded_and_monotone_in_threshold(self, seed):
        dets, gts = random_case(seed)
        aps = class_ap(dets, gts, COCO_THRESHOLDS)
        assert all(0.0 <= a <= 1.0 for a in aps)
        assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


class TestEvaluateDetections:
    def test_perfect_detector(self):
        gt = [[(A, 0), (B, 1)], [(B, 2)]]
        preds = [[Detection(b, 1.0, c) for b, c in img] for img in gt]
        rep = evaluate_detections(preds, gt, 3)
        assert rep["ap50"] == 1.0 and rep["ap50_95"] == 1.0
        assert set(rep["per_class"]) == {0, 1, 2}

    def test_empty_predictions(self):
        rep = evaluate_detections([[], []], [[(A, 0)], [(B, 1)]], 2)
        assert rep["ap50"] == 0.0 and rep["ap50_95"] == 0.0

    def test_classes_without_gt_skipped(self):
        gt = [[(A, 0)]]
        preds = [[Detection(A, 0.9, 0), Detection(B, 0.8, 1)]]
        rep = evaluate_detections(preds, gt, 3)
        assert set(rep["per_class"]) == {0}
        assert rep["ap50"] == 1.0

    def test_wrong_class_is_miss(self):
        rep = evaluate_detections([[Detection(A, 0.9, 1)]], [[(A, 0)]], 2)
        assert rep["ap50"] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_detections([[]], [[], []], 1)
