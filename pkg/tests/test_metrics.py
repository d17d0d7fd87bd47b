import json
import math

import numpy as np
import pytest

from fruitgrader import metrics
from fruitgrader.cascade import Detection
from fruitgrader.imaging import BBox
from fruitgrader.metrics import (
    EmptyMatrixError,
    IdOutOfRangeError,
    LengthMismatchError,
    accuracy_metrics,
    confusion_matrix,
    detection_pr,
    iou,
)


class TestConfusionMatrix:
    def test_perfect_is_diagonal(self):
        cm = confusion_matrix([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert np.array_equal(cm.counts, np.diag([1, 2, 1]))
        assert accuracy_metrics(cm)["overall"] == 1.0

    def test_hand_tally(self):
        cm = confusion_matrix([0, 1, 2], [1, 1, 2], 3)
        assert cm.counts[0, 1] == 1
        assert np.diag(cm.counts).tolist() == [0, 1, 1]

    def test_empty_is_zero_matrix(self):
        cm = confusion_matrix([], [], 3)
        assert cm.counts.sum() == 0
        with pytest.raises(EmptyMatrixError):
            accuracy_metrics(cm)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            confusion_matrix([0, 1], [0], 2)

    def test_id_out_of_range(self):
        with pytest.raises(IdOutOfRangeError):
            confusion_matrix([0, 3], [0, 0], 3)

    def test_total_equals_samples(self):
        rng = np.random.default_rng(0)
        truths = rng.integers(0, 4, 100).tolist()
        preds = rng.integers(0, 4, 100).tolist()
        cm = confusion_matrix(truths, preds, 4)
        assert int(cm.counts.sum()) == 100


class TestAccuracy:
    def test_paper_per_class_values_regenerate(self):
        # a matrix whose row-normalized diagonals are 95.3% / 93.3% / 89.3%
        counts = np.array(
            [
                [953, 30, 17],
                [40, 933, 27],
                [60, 47, 893],
            ]
        )
        cm = metrics.ConfusionMatrix(counts, ["bad mango", "raw mango", "ripe mango"])
        per_class = accuracy_metrics(cm)["per_class"]
        assert per_class == pytest.approx([0.953, 0.933, 0.893])

    def test_zero_row_is_nan(self):
        cm = confusion_matrix([0, 0], [0, 1], 3)
        per_class = accuracy_metrics(cm)["per_class"]
        assert per_class[0] == 0.5
        assert math.isnan(per_class[1]) and math.isnan(per_class[2])

    def test_uniform_random_near_one_over_k(self):
        rng = np.random.default_rng(1)
        n, k = 10_000, 4
        truths = rng.integers(0, k, n)
        preds = rng.integers(0, k, n)
        cm = confusion_matrix(truths.tolist(), preds.tolist(), k)
        assert abs(accuracy_metrics(cm)["overall"] - 1 / k) < 0.05


class TestIoU:
    def test_identical(self):
        b = BBox(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 2, 2), BBox(5, 5, 2, 2)) == 0.0

    def test_hand_case_one_seventh(self):
        v = iou(BBox(0, 0, 2, 2), BBox(1, 1, 2, 2))
        assert v == pytest.approx(1 / 7)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            a = BBox(*rng.uniform(0, 10, 2), *rng.uniform(0.5, 5, 2))
            b = BBox(*rng.uniform(0, 10, 2), *rng.uniform(0.5, 5, 2))
            assert iou(a, b) == pytest.approx(iou(b, a))
            assert 0.0 <= iou(a, b) <= 1.0


def det(x, y, w, h, score):
    return Detection(BBox(x, y, w, h), score)


class TestDetectionPR:
    def test_perfect(self):
        gts = [[BBox(0, 0, 10, 10)], [BBox(5, 5, 8, 8)]]
        dets = [[det(0, 0, 10, 10, 1.0)], [det(5, 5, 8, 8, 0.9)]]
        pr = detection_pr(dets, gts, 0.5)
        assert pr.precision == 1.0 and pr.recall == 1.0

    def test_no_detections_convention(self):
        pr = detection_pr([[]], [[BBox(0, 0, 4, 4)]], 0.5)
        assert pr.recall == 0.0
        assert pr.precision == 1.0

    def test_double_detection_half_precision(self):
        gts = [[BBox(0, 0, 10, 10)]]
        dets = [[det(0, 0, 10, 10, 0.9), det(1, 1, 10, 10, 0.5)]]
        pr = detection_pr(dets, gts, 0.5)
        assert pr.precision == 0.5
        assert pr.recall == 1.0

    def test_greedy_prefers_higher_score(self):
        gts = [[BBox(0, 0, 10, 10)]]
        dets = [[det(0, 0, 10, 10, 0.2), det(0.5, 0.5, 10, 10, 0.8)]]
        pr = detection_pr(dets, gts, 0.5)
        assert pr.matches == [(0, 1, 0)]

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(3)
        gts, dets = [], []
        for _ in range(10):
            g = [BBox(*rng.uniform(0, 30, 2), *rng.uniform(4, 12, 2)) for _ in range(3)]
            d = [
                det(*rng.uniform(0, 30, 2), *rng.uniform(4, 12, 2), float(rng.random()))
                for _ in range(4)
            ]
            gts.append(g)
            dets.append(d)
        last_p, last_r = None, None
        for thr in (0.2, 0.4, 0.6, 0.8, 1.0):
            pr = detection_pr(dets, gts, thr)
            if last_p is not None:
                assert pr.precision <= last_p + 1e-12
                assert pr.recall <= last_r + 1e-12
            last_p, last_r = pr.precision, pr.recall

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            detection_pr([[]], [[]], 0.0)


class TestReports:
    def cm(self):
        return confusion_matrix([0, 0, 1, 1, 1], [0, 1, 1, 1, 0], 2, ["neg", "pos"])

    def test_text_contains_counts(self):
        text = metrics.report_text(self.cm())
        assert "neg" in text and "pos" in text
        assert "overall accuracy: 60.00%" in text

    def test_csv_triples(self):
        lines = metrics.report_csv(self.cm()).strip().splitlines()
        assert lines[0] == "true,pred,count"
        assert "neg,pos,1" in lines
        assert len(lines) == 5

    def test_json_fields(self):
        doc = json.loads(metrics.report_json(self.cm()))
        assert doc["class_names"] == ["neg", "pos"]
        assert doc["counts"] == [[1, 1], [1, 2]]
        assert doc["overall"] == pytest.approx(0.6)
