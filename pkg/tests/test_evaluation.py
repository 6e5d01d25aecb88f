import math
import random

import numpy as np
import pytest
import torch

from bevcon_lab.evaluation import (
    Prediction,
    build_targets,
    decode_predictions,
    detection_loss,
    evaluate,
    interpolated_ap,
)
from bevcon_lab.geometry import BEVSpec, Box3D
from bevcon_lab.model import DetectionOutput

from _oracles import grad_check

SPEC = BEVSpec(-4.0, 4.0, -4.0, 4.0, 4, 4)  # 2 m cells


def box(x, y, yaw=0.0, c=0, iid=0, l=4.0, w=2.0):
    return Box3D((x, y, 0.75), l, w, 1.5, yaw, c, iid)


def pred(x, y, score, c=0, yaw=0.0, cell=0):
    return Prediction(box(x, y, yaw, c), score, c, cell)


def loss_oracle(logits, reg, frames, spec, alpha=0.25, gamma=2.0):
    """Per-cell loop: focal over all cells, L1 over positive cells, both / max(1, n_pos)."""
    n_f, k, h, w = logits.shape
    targets = {}
    for i, boxes in enumerate(frames):
        for b in boxes:
            gx = (b.center[0] - spec.x_min) / spec.cell_x
            gy = (b.center[1] - spec.y_min) / spec.cell_y
            col, row = math.floor(gx), math.floor(gy)
            if 0 <= col < w and 0 <= row < h:
                enc = [gx - col - 0.5, gy - row - 0.5, b.center[2], math.log(b.l), math.log(b.w), math.sin(b.yaw), math.cos(b.yaw)]
                targets[(i, row, col)] = (b.class_id, enc)
    total_cls = 0.0
    for i in range(n_f):
        for c in range(k):
            for r in range(h):
                for q in range(w):
                    t = 1.0 if (i, r, q) in targets and targets[(i, r, q)][0] == c else 0.0
                    p = 1.0 / (1.0 + math.exp(-logits[i, c, r, q]))
                    pt = p if t else 1 - p
                    at = alpha if t else 1 - alpha
                    total_cls += -at * (1 - pt) ** gamma * math.log(pt)
    total_reg = sum(abs(reg[i, j, r, q] - enc[j]) for (i, r, q), (_, enc) in targets.items() for j in range(7))
    n = max(1, len(targets))
    return total_cls / n + total_reg / n


class TestDetectionLoss:
    def test_oracle(self, rng):
        frames = [[box(-1.3, 2.2, 0.4, 1, 0), box(3.1, -3.5, -2.0, 0, 1)], [], [box(0.2, 0.1, 1.0, 2, 5)]]
        logits = rng.standard_normal((3, 3, 4, 4))
        reg = rng.standard_normal((3, 7, 4, 4))
        got = detection_loss(DetectionOutput(torch.from_numpy(logits), torch.from_numpy(reg)), frames, SPEC).item()
        assert got == pytest.approx(loss_oracle(logits, reg, frames, SPEC), rel=1e-12)

    def test_no_objects(self, rng):
        logits = rng.standard_normal((1, 2, 4, 4))
        got = detection_loss(DetectionOutput(torch.from_numpy(logits), torch.zeros(1, 7, 4, 4, dtype=torch.float64)), [[]], SPEC)
        assert got.item() == pytest.approx(loss_oracle(logits, np.zeros((1, 7, 4, 4)), [[]], SPEC), rel=1e-12)

    def test_shared_cell_last_wins(self):
        cls, reg, pos = build_targets([[box(0.5, 0.5, c=0, iid=1), box(1.5, 1.5, c=1, iid=2)]], SPEC, 2, torch.float64)
        assert int(pos.sum()) == 1
        assert cls[0, :, 2, 2].tolist() == [0.0, 1.0]
        assert reg[0, 0, 2, 2].item() == pytest.approx(0.25)

    def test_perfect_fit_limit(self):
        frames = [[box(-1.3, 2.2, 0.4, 1, 0), box(3.1, -3.5, -2.0, 0, 1)]]
        cls, reg, _ = build_targets(frames, SPEC, 2, torch.float64)
        logits = torch.where(cls > 0, 30.0, -30.0).double()
        out = DetectionOutput(logits, reg)
        assert detection_loss(out, frames, SPEC).item() < 1e-20
        preds = decode_predictions(out, SPEC)
        report = evaluate([preds], frames)
        assert report.mAP == 1.0 and report.mATE < 1e-12 and report.mAOE < 1e-12

    def test_gradient(self, rng):
        frames = [[box(-1.3, 2.2, 0.4, 1, 0), box(3.1, -3.5, -2.0, 0, 1)]]
        logits = torch.from_numpy(rng.standard_normal((1, 2, 4, 4))).requires_grad_()
        reg = torch.from_numpy(rng.standard_normal((1, 7, 4, 4))).requires_grad_()
        assert grad_check(lambda: detection_loss(DetectionOutput(logits, reg), frames, SPEC), [logits, reg]) < 1e-4


def _single_peak_output(cells, n_classes=2, spec=SPEC):
    """Logit 5 at each ``(row, col, class, dx, dy)`` entry, -10 elsewhere."""
    logits = torch.full((1, n_classes, spec.grid_h, spec.grid_w), -10.0, dtype=torch.float64)
    reg = torch.zeros(1, 7, spec.grid_h, spec.grid_w, dtype=torch.float64)
    reg[0, 3] = math.log(4.0)
    reg[0, 4] = math.log(2.0)
    reg[0, 6] = 1.0
    for k, (row, col, c, dx, dy) in enumerate(cells):
        logits[0, c, row, col] = 5.0 - k * 0.1
        reg[0, 0, row, col] = dx
        reg[0, 1, row, col] = dy
    return DetectionOutput(logits, reg)


class TestDecode:
    def test_round_trip(self):
        preds = decode_predictions(_single_peak_output([(1, 2, 1, 0.25, -0.1)]), SPEC)
        assert len(preds) == 1
        p = preds[0]
        assert p.class_id == 1 and p.cell_index == 1 * 4 + 2
        assert p.box.center[:2] == pytest.approx((2 * 2.75 - 4.0, 2 * 1.4 - 4.0))
        assert (p.box.l, p.box.w, p.box.yaw) == pytest.approx((4.0, 2.0, 0.0))
        assert p.score == pytest.approx(1 / (1 + math.exp(-5.0)))

    def test_nms_radius(self):
        # centers 0.3 m apart: the lower score is suppressed; 0.6 m apart: both survive
        close = _single_peak_output([(1, 1, 0, 0.45, 0.0), (1, 2, 0, -0.4, 0.0)])
        p = decode_predictions(close, SPEC)
        assert len(p) == 1 and p[0].cell_index == 5
        far = _single_peak_output([(1, 1, 0, 0.3, 0.0), (1, 2, 0, -0.4, 0.0)])
        assert len(decode_predictions(far, SPEC)) == 2

    def test_threshold_and_max_dets(self):
        out = _single_peak_output([(0, 0, 0, 0, 0), (3, 3, 1, 0, 0), (0, 3, 0, 0, 0)])
        assert len(decode_predictions(out, SPEC, max_dets=2)) == 2
        assert decode_predictions(out, SPEC, score_threshold=0.999) == []

    def test_invalid_score(self):
        with pytest.raises(ValueError):
            pred(0, 0, 1.5)


class TestMetrics:
    def test_hand_pr_table(self):
        gts = [[box(0, 0, iid=1), box(10, 0, iid=2)]]
        preds = [[pred(0.1, 0, 0.9), pred(5, 5, 0.8), pred(10, 0.2, 0.7)]]
        # precision (1, 1/2, 2/3) at recall (1/2, 1/2, 1): levels <= 0.5 see 1, the rest 2/3
        expected = (51 * 1.0 + 50 * (2.0 / 3.0)) / 101
        report = evaluate(preds, gts, thresholds=(2.0,))
        assert report.mAP == pytest.approx(expected, abs=1e-12)
        assert report.mATE == pytest.approx((0.1 + 0.2) / 2)

    def test_hand_example_two_thresholds(self):
        gts = [[box(0, 0, iid=1)], [box(3, 3, iid=2, c=1)]]
        preds = [[pred(0.3, 0, 0.9)], [pred(3, 3.6, 0.8, c=1, yaw=0.2)]]
        report = evaluate(preds, gts, thresholds=(0.5, 1.0))
        assert report.per_class[0].ap == {0.5: 1.0, 1.0: 1.0}
        assert report.per_class[1].ap == {0.5: 0.0, 1.0: 1.0}
        assert report.mAP == pytest.approx(0.75)
        assert report.mATE == pytest.approx(0.45)
        assert report.mAOE == pytest.approx(0.1)

    def test_empty_predictions(self):
        report = evaluate([[], []], [[box(0, 0)], [box(1, 1, c=2)]])
        assert report.mAP == 0.0 and report.mATE == 2.0 and report.mAOE == pytest.approx(math.pi)

    def test_classes_without_gt_skipped(self):
        report = evaluate([[pred(0, 0, 0.9), pred(5, 5, 0.9, c=3)]], [[box(0, 0)]])
        assert list(report.per_class) == [0] and report.mAP == 1.0

    def test_order_invariance(self, rng):
        gts = [[box(float(x), float(y), iid=k, c=k % 2) for k, (x, y) in enumerate(rng.uniform(-20, 20, (6, 2)))] for _ in range(3)]
        preds = [
            [pred(float(x), float(y), float(s), c=int(c)) for x, y, s, c in zip(*rng.uniform(-20, 20, (2, 9)), rng.random(9), rng.integers(0, 2, 9))]
            for _ in range(3)
        ]
        ref = evaluate(preds, gts).to_dict()
        shuffled = [random.Random(k).sample(p, len(p)) for k, p in enumerate(preds)]
        assert evaluate(shuffled, gts).to_dict() == ref

    def test_duplicate_is_false_positive(self):
        gts = [[box(0, 0)]]
        single = evaluate([[pred(0, 0, 0.9)]], gts, thresholds=(1.0,))
        dup = evaluate([[pred(0, 0, 0.9), pred(0, 0, 0.8)]], gts, thresholds=(1.0,))
        assert single.mAP == 1.0 and dup.mAP == 1.0  # the duplicate ranks after full recall
        early = evaluate([[pred(0, 0, 0.8), pred(0.1, 0, 0.9), pred(3, 3, 0.7)]], [[box(0, 0), box(3, 3, iid=1)]], thresholds=(1.0,))
        # ranked TP, FP, TP: precision (1, 1/2, 2/3)
        assert early.mAP == pytest.approx((51 + 50 * 2 / 3) / 101)

    def test_interpolated_ap_edges(self):
        assert interpolated_ap(np.array([]), np.array([])) == 0.0
        assert interpolated_ap(np.array([1.0]), np.array([1.0])) == 1.0
        assert interpolated_ap(np.array([1.0]), np.array([0.5])) == pytest.approx(51 / 101)

    def test_report_text(self):
        text = evaluate([[pred(0, 0, 0.9)]], [[box(0, 0)]]).to_text()
        assert text.splitlines()[0] == "mAP 1.000000"
        assert "class_0.AP@0.5 1.000000" in text
