import json

import numpy as np
import pytest

from voidseg.extraction import (
    DETECTED,
    INTERPOLATED,
    REFINED,
    BallDetection,
    BallGrid,
    ExtractionConfig,
    cluster_grid,
    crop_ball,
    crop_name,
    detect_balls,
    extract_balls,
    filter_by_radius,
    interpolate_missing,
    iter_slices,
    radius_mode,
    refine_by_template,
    slice_and_threshold,
    write_extraction,
)
from voidseg.imaging import disc_mask
from voidseg.synth import synthesize_board


def dets(radii):
    return [BallDetection(10.0 * i, 0.0, r) for i, r in enumerate(radii)]


class TestRadiusFilter:
    def test_fixture(self):
        kept = filter_by_radius(dets([20, 20, 20, 26]), sca=5)
        assert [d.r for d in kept] == [20, 20, 20]

    def test_boundary_inclusive(self):
        # r_thr = 4: |20 - 24| = 4 stays, 24.5 goes
        kept = filter_by_radius(dets([20, 20, 20, 24, 24.5]), sca=5)
        assert [d.r for d in kept] == [20, 20, 20, 24]

    def test_mode_tie_goes_to_larger(self):
        assert radius_mode([10, 10, 12, 12]) == 12

    def test_single_detection_survives(self):
        assert len(filter_by_radius(dets([7]))) == 1

    def test_empty(self):
        assert filter_by_radius([]) == []
        with pytest.raises(ValueError):
            radius_mode([])


class TestSlicing:
    def test_tiles_cover_board_once(self):
        cfg = ExtractionConfig()
        cover = np.zeros((700, 950), int)
        for rs, cs in iter_slices(cover.shape, cfg):
            assert rs.stop - rs.start <= 300 and cs.stop - cs.start <= 400
            cover[rs, cs] += 1
        assert (cover == 1).all()

    def test_blank_slice_gives_no_foreground(self, rng):
        board = np.clip(100 + rng.normal(0, 2, (300, 400)), 0, 255).astype(np.uint8)
        assert not slice_and_threshold(board).any()

    def test_balls_per_slice(self):
        board, _ = synthesize_board(rows=3, cols=4, pitch=80, r_ball=18)
        mask = slice_and_threshold(board)
        assert mask.sum() == pytest.approx(12 * np.pi * 18**2, rel=0.03)


class TestClustering:
    def test_grid_ids_and_pitch(self):
        balls = [BallDetection(50 + 80 * j, 40 + 70 * i, 15) for i in range(3) for j in range(4)]
        grid = cluster_grid(balls)
        assert len(grid.rows) == 3 and len(grid.cols) == 4
        assert grid.d_ref_h == pytest.approx(80) and grid.d_ref_v == pytest.approx(70)
        assert {(b.row_id, b.col_id) for b in grid.balls} == {(i, j) for i in range(3) for j in range(4)}

    def test_undefined_d_ref(self):
        grid = cluster_grid([BallDetection(10, 10, 5)])
        assert grid.d_ref_h is None and grid.d_ref_v is None and not grid.d_ref_defined


class TestInterpolation:
    def grid(self, missing):
        balls = [
            BallDetection(50.0 + 80 * j, 50.0 + 80 * i, 15)
            for i in range(4)
            for j in range(5)
            if (i, j) not in missing
        ]
        return cluster_grid(balls)

    def test_single_gap(self):
        props = interpolate_missing(self.grid({(1, 2)}))
        assert len(props) == 1
        assert (props[0].cx, props[0].cy) == pytest.approx((210, 130))
        assert props[0].source == INTERPOLATED

    def test_double_gap_in_row(self):
        # k = round(240 / 80) = 3 -> two balls between the neighbours
        props = interpolate_missing(self.grid({(1, 1), (1, 2)}))
        assert sorted((round(p.cx), round(p.cy)) for p in props) == [(130, 130), (210, 130)]

    def test_no_gap_no_proposals(self):
        assert interpolate_missing(self.grid(set())) == []

    def test_corner_not_recoverable(self):
        # a missing corner ball has no neighbours on both sides
        assert interpolate_missing(self.grid({(0, 0)})) == []


class TestTemplateRefinement:
    def board_with_balls(self, centres, r=12, shape=(120, 200)):
        img = np.full(shape, 40, np.uint8)
        for cx, cy in centres:
            img[disc_mask(shape, cx, cy, r)] = 180
        return img

    def test_exact_guess_keeps_zero_offset(self):
        board = self.board_with_balls([(40, 60), (100, 60), (160, 60)])
        grid = cluster_grid([BallDetection(40, 60, 12), BallDetection(160, 60, 12)])
        out = refine_by_template(board, grid, BallDetection(100, 60, 12, source=INTERPOLATED))
        assert (out.cx, out.cy) == (100, 60)
        assert out.source == REFINED and out.prior == (100, 60)

    def test_recovers_offset(self):
        board = self.board_with_balls([(40, 60), (103, 58), (160, 60)])
        grid = cluster_grid([BallDetection(40, 60, 12), BallDetection(160, 60, 12)])
        out = refine_by_template(board, grid, BallDetection(100, 60, 12, source=INTERPOLATED))
        assert (out.cx, out.cy) == (103, 58)

    def test_brute_force_ssd(self, rng):
        board = rng.integers(0, 256, (80, 80)).astype(np.uint8)
        ref = BallDetection(20, 20, 6)
        grid = BallGrid([ref], r_mode=6)
        cand = BallDetection(50, 50, 6, source=INTERPOLATED)
        cfg = ExtractionConfig(search_range=3)
        out = refine_by_template(board, grid, cand, cfg)
        half = 8
        tpl = board[20 - half : 20 + half + 1, 20 - half : 20 + half + 1].astype(int)
        scores = {}
        for dy in range(-3, 4):
            for dx in range(-3, 4):
                win = board[50 + dy - half : 50 + dy + half + 1, 50 + dx - half : 50 + dx + half + 1].astype(int)
                scores[(dy, dx)] = ((win - tpl) ** 2).sum()
        dy, dx = min(scores, key=lambda o: (scores[o], o[0] ** 2 + o[1] ** 2, o))
        assert (out.cy - 50, out.cx - 50) == (dy, dx)

    def test_flat_board_tie_gives_zero_offset(self):
        board = np.full((100, 100), 90, np.uint8)
        grid = BallGrid([BallDetection(30, 30, 8)], r_mode=8)
        out = refine_by_template(board, grid, BallDetection(60, 60, 8, source=INTERPOLATED))
        assert (out.cx, out.cy) == (60, 60)

    def test_edge_clipping_noted(self):
        board = np.full((60, 60), 90, np.uint8)
        grid = BallGrid([BallDetection(30, 30, 8)], r_mode=8)
        out = refine_by_template(board, grid, BallDetection(12, 30, 8, source=INTERPOLATED))
        assert "clipped" in out.note

    def test_needs_detected_reference(self):
        grid = BallGrid([BallDetection(30, 30, 8, source=INTERPOLATED)], r_mode=8)
        with pytest.raises(ValueError):
            refine_by_template(np.zeros((60, 60), np.uint8), grid, BallDetection(40, 40, 8))


class TestPipeline:
    def test_clean_board(self):
        board, truth = synthesize_board(rows=4, cols=5, pitch=90, r_ball=18, jitter=2, seed=3)
        grid = extract_balls(board)
        assert len(grid.balls) == 20
        for t in truth.balls:
            d = min(np.hypot(b.cx - t.cx, b.cy - t.cy) for b in grid.balls)
            assert d <= 1.0

    def test_occluded_ball_refined(self):
        board, truth = synthesize_board(rows=4, cols=5, pitch=90, r_ball=18, occluded=[(1, 2)], seed=4)
        grid = extract_balls(board)
        assert len(grid.balls) == 20
        t = truth.balls[1 * 5 + 2]
        b = min(grid.balls, key=lambda b: np.hypot(b.cx - t.cx, b.cy - t.cy))
        assert b.source == REFINED
        assert np.hypot(b.cx - t.cx, b.cy - t.cy) <= 3

    def test_outlier_blob_removed(self):
        board, _ = synthesize_board(rows=3, cols=4, pitch=90, r_ball=18, seed=5)
        board[disc_mask(board.shape, 10, 10, 5)] = 160  # small via-like blob
        grid = extract_balls(board)
        assert all(b.r > 14 for b in grid.balls)
        assert len(grid.balls) == 12

    def test_blank_board(self):
        assert extract_balls(np.full((200, 200), 50, np.uint8)).balls == []

    def test_detect_single_disc(self):
        mask = disc_mask((64, 64), 31.5, 30.2, 20)
        (d,) = detect_balls(mask)
        assert d.source == DETECTED
        assert abs(d.cx - 31.5) < 0.1 and abs(d.cy - 30.2) < 0.1 and abs(d.r - 20) < 0.6


class TestCrops:
    def test_centre_pixel(self):
        board = np.arange(200 * 200).reshape(200, 200) % 251
        crop = crop_ball(board.astype(np.uint8), BallDetection(100.4, 80.6, 20))
        assert crop.image.shape == (64, 64)
        assert crop.image[32, 32] == board[81, 100]
        assert (crop.cx, crop.cy) == pytest.approx((32.4, 31.6))

    def test_zero_padding_at_edge(self):
        board = np.full((100, 100), 200, np.uint8)
        crop = crop_ball(board, BallDetection(5, 5, 20))
        assert crop.image[0, 0] == 0 and crop.image[40, 40] == 200
        assert crop.image[:27].max() == 0  # rows above the board

    def test_disc_area(self):
        crop = crop_ball(np.zeros((100, 100), np.uint8), BallDetection(50, 50, 20))
        assert crop.disc.sum() == 1257

    def test_write_extraction(self, tmp_path):
        board, _ = synthesize_board(rows=2, cols=3, pitch=80, r_ball=16, seed=1)
        grid = extract_balls(board)
        paths = write_extraction("b7", board, grid, tmp_path)
        assert len(paths) == 6
        assert (tmp_path / crop_name("b7", grid.balls[0])).exists()
        recs = [json.loads(line) for line in open(tmp_path / "balls.jsonl")]
        assert {r["file"] for r in recs} == {p.name for p in paths}
        assert all(r["file"].startswith("board_b7_ball_") for r in recs)

    def test_record_round_trip(self):
        b = BallDetection(1.5, 2.5, 3.0, REFINED, 1, 2, prior=(1.0, 2.0), note="x")
        assert BallDetection.from_record(json.loads(json.dumps(b.to_record()))) == b
