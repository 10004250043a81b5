import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voidseg.evaluation import (
    TABLE3_ROWS,
    binarize,
    f1_from_pr,
    filter_regions,
    format_table,
    iou,
    load_report,
    match_and_score,
    match_regions,
    overlay_labels,
    postprocess,
    prf,
    render_overlay,
    score_ball,
    void_percentage,
)
from voidseg.extraction import BallDetection, crop_ball
from voidseg.imaging import disc_mask


def box(r0, c0, r1, c1, shape=(64, 64)):
    m = np.zeros(shape, bool)
    m[r0:r1, c0:c1] = True
    return m


class TestPostprocess:
    def test_threshold_is_strict(self):
        p = np.array([[0.5, 0.5000001, 0.2]])
        np.testing.assert_array_equal(binarize(p), [[False, True, False]])

    def test_area_filter_boundary(self):
        m = box(0, 0, 3, 3) | box(10, 10, 12, 14)  # areas 9 and 8
        regions = filter_regions(m, a_min=9)
        assert [int(r.sum()) for r in regions] == [9]

    def test_area_filter_uses_8_connectivity(self):
        m = np.zeros((10, 10), bool)
        for i in range(9):
            m[i, i] = True  # a diagonal line of 9 pixels is one region
        assert len(filter_regions(m, 9)) == 1

    def test_void_percentage(self):
        disc = (32, 32, 20)
        ball = disc_mask((64, 64), *disc)
        prob = np.zeros((64, 64))
        prob[30:35, 30:35] = 0.9  # 25 px
        res = postprocess(prob, disc, ball_id="b")
        assert res.void_percentage == pytest.approx(100 * 25 / 1257)
        assert res.to_record()["areas"] == [25]
        assert void_percentage([], ball) == 0.0

    def test_void_outside_ball_not_counted(self):
        ball = disc_mask((64, 64), 32, 32, 10)
        assert void_percentage(box(0, 0, 5, 5), ball) == 0.0

    def test_zero_ball_area(self):
        with pytest.raises(ValueError):
            void_percentage(box(0, 0, 2, 2), np.zeros((64, 64), bool))


class TestMetrics:
    def test_table_row(self):
        assert round(f1_from_pr(0.95, 0.76), 2) == 0.84

    def test_prf(self):
        m = prf(8, 2, 4)
        assert m["precision"] == pytest.approx(0.8)
        assert m["recall"] == pytest.approx(8 / 12)
        assert m["f1"] == pytest.approx(2 * 0.8 * (8 / 12) / (0.8 + 8 / 12))
        assert m["flags"] == []

    def test_undefined_ratios_flagged(self):
        m = prf(0, 0, 0)
        assert m["precision"] == m["recall"] == m["f1"] == 0.0
        assert set(m["flags"]) == {"precision_undefined", "recall_undefined"}

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_prf_bounds(self, tp, fp, fn):
        m = prf(tp, fp, fn)
        for k in ("precision", "recall", "f1"):
            assert 0.0 <= m[k] <= 1.0
        assert min(m["precision"], m["recall"]) - 1e-12 <= m["f1"] <= max(m["precision"], m["recall"]) + 1e-12

    def test_iou(self):
        a, b = box(0, 0, 4, 4), box(2, 2, 6, 6)
        assert iou(a, b) == pytest.approx(4 / 28)
        assert iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 0.0


class TestMatching:
    def test_iou_boundary_inclusive(self):
        gt = box(0, 0, 10, 3)  # 30 px
        below = box(0, 0, 8, 1)  # 8 / 30 < 0.3
        at = box(0, 0, 9, 1)  # 9 / 30 == 0.3
        assert iou(at, gt) == pytest.approx(0.3)
        assert score_ball(below, gt).tp == 0
        assert score_ball(at, gt).tp == 1
        assert score_ball(at, gt, iou_min=0.31).tp == 0

    def test_one_to_one(self):
        gt = [box(0, 0, 4, 8)]
        pred = [box(0, 0, 4, 4), box(0, 4, 4, 8)]  # both halves have IoU 0.5
        matches, up, ug = match_regions(pred, gt)
        assert len(matches) == 1 and len(up) == 1 and ug == []

    def test_greedy_prefers_best_pair(self):
        g0, g1 = box(0, 0, 4, 4), box(0, 4, 4, 8)
        p0 = box(0, 0, 4, 4)  # perfect for g0
        p1 = box(0, 1, 4, 8)  # overlaps both, best with g1
        matches, _, _ = match_regions([p0, p1], [g0, g1])
        assert sorted((i, j) for i, j, _ in matches) == [(0, 0), (1, 1)]

    def test_counts(self):
        gt = box(0, 0, 5, 5) | box(20, 20, 25, 25)
        pred = box(0, 0, 5, 5) | box(40, 40, 45, 45)
        s = score_ball(pred, gt)
        assert (s.tp, s.fp, s.fn) == (1, 1, 1)
        assert (s.px_tp, s.px_fp, s.px_fn) == (25, 25, 25)

    def test_self_match(self):
        rng = np.random.default_rng(0)
        gt = {f"b{i}": rng.random((64, 64)) > 0.97 for i in range(5)}
        rep = match_and_score(dict(gt), gt)
        assert rep.precision == rep.recall == rep.f1 == 1.0
        assert rep.pixel["f1"] == 1.0

    def test_mismatched_ids(self):
        with pytest.raises(ValueError):
            match_and_score({"a": np.zeros((4, 4))}, {"b": np.zeros((4, 4))})


class TestReports:
    def test_json_and_table(self, tmp_path):
        gt = {"a": box(0, 0, 5, 5), "b": box(10, 10, 15, 15)}
        pred = {"a": box(0, 0, 5, 5), "b": np.zeros((64, 64), bool)}
        rep = match_and_score(pred, gt, name=TABLE3_ROWS[1], a_min=9, threshold=0.5)
        path = rep.write(tmp_path / "r.json")
        d = load_report(path)
        assert d["precision"] == 1.0 and d["recall"] == 0.5
        assert d["matching"]["iou_min"] == 0.3 and d["a_min"] == 9
        text = format_table([rep, d])
        lines = text.splitlines()
        assert "Precision" in lines[0] and "F1 score" in lines[0]
        assert lines[2].startswith(TABLE3_ROWS[1]) and lines[2].rstrip().endswith("0.67")
        json.dumps(d)  # serialisable


class TestOverlay:
    def test_draws_contour_and_label(self, tmp_path):
        board = np.full((100, 120), 60, np.uint8)
        board[disc_mask(board.shape, 60, 55, 20)] = 150
        crop = crop_ball(board, BallDetection(60, 55, 20))
        prob = np.zeros((64, 64))
        prob[28:36, 28:36] = 1
        res = postprocess(prob, (crop.cx, crop.cy, 20))
        img = render_overlay(board, [crop], [res], tmp_path / "o.png")
        assert (tmp_path / "o.png").exists()
        assert img[55 - 4, 60] == 255  # top edge of the 8x8 void box
        assert (img[:35] > 200).any()  # anti-aliased text above the ball
        ((text, x, y),) = overlay_labels([crop], [res])
        assert text == f"{100 * 64 / 1257:.1f}" and (x, y) == (60, 35)
