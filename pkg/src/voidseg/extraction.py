"""Solder-ball extraction from a board radiograph.

Pipeline: per-slice Otsu -> connected components -> circle fits -> radius
mode filter -> row/column clustering -> gap interpolation -> SSD template
refinement -> fixed-size crops.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .imaging import (
    CircleFitError,
    as_gray,
    connected_components,
    disc_mask,
    fit_circle,
    otsu_threshold,
    save_image,
)

log = logging.getLogger(__name__)

DETECTED, INTERPOLATED, REFINED = "detected", "interpolated", "refined"


@dataclass
class ExtractionConfig:
    slice_h: int = 300  # rows
    slice_w: int = 400  # columns
    sca: float = 5.0
    search_range: int = 5
    crop_size: int = 64
    min_area: int = 20
    max_rel_residual: float = 0.08
    min_contrast: float = 20.0  # slices with weaker Otsu separation are blank
    invert: bool = False

    def __post_init__(self):
        for name in ("slice_h", "slice_w", "sca", "crop_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.search_range < 0:
            raise ValueError("search_range must be >= 0")


@dataclass
class BallDetection:
    cx: float
    cy: float
    r: float
    source: str = DETECTED
    row_id: int = -1
    col_id: int = -1
    prior: tuple[float, float] | None = None  # location before refinement
    residual: float = 0.0
    note: str = ""

    def to_record(self) -> dict:
        rec = {k: v for k, v in asdict(self).items() if v not in (None, "")}
        if self.prior is not None:
            rec["prior"] = list(self.prior)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> BallDetection:
        rec = dict(rec)
        if rec.get("prior") is not None:
            rec["prior"] = tuple(rec["prior"])
        return cls(**rec)


@dataclass
class BallGrid:
    balls: list[BallDetection]
    rows: list[list[int]] = field(default_factory=list)  # indices into balls
    cols: list[list[int]] = field(default_factory=list)
    d_ref_h: float | None = None
    d_ref_v: float | None = None
    r_mode: float = 0.0

    @property
    def d_ref_defined(self) -> bool:
        return self.d_ref_h is not None or self.d_ref_v is not None


# ---------------------------------------------------------------------------
# Thresholding
# ---------------------------------------------------------------------------


def iter_slices(shape, cfg: ExtractionConfig):
    """Yield non-overlapping (row_slice, col_slice) tiles covering ``shape``."""
    h, w = shape
    for r0 in range(0, h, cfg.slice_h):
        for c0 in range(0, w, cfg.slice_w):
            yield slice(r0, min(r0 + cfg.slice_h, h)), slice(c0, min(c0 + cfg.slice_w, w))


def slice_and_threshold(board, cfg: ExtractionConfig | None = None) -> np.ndarray:
    """Otsu each slice independently and reassemble the binary board."""
    cfg = cfg or ExtractionConfig()
    board = as_gray(board)
    out = np.zeros(board.shape, dtype=bool)
    for rs, cs in iter_slices(board.shape, cfg):
        tile = board[rs, cs]
        t, fg = otsu_threshold(tile, invert=cfg.invert)
        if fg.any() and (~fg).any():
            contrast = abs(float(tile[fg].mean()) - float(tile[~fg].mean()))
            if contrast < cfg.min_contrast:
                fg = np.zeros_like(fg)
        out[rs, cs] = fg
    return out


# ---------------------------------------------------------------------------
# Detection and the radius-mode filter
# ---------------------------------------------------------------------------


def radius_mode(radii) -> float:
    """Mode of radii rounded to integers; ties go to the larger radius."""
    counts = Counter(int(round(r)) for r in radii)
    if not counts:
        raise ValueError("no radii")
    top = max(counts.values())
    return float(max(r for r, c in counts.items() if c == top))


def filter_by_radius(detections: list[BallDetection], sca: float = 5.0) -> list[BallDetection]:
    """Drop detections with ``|r_mode - r| > r_mode / sca``."""
    if not detections:
        return []
    r_mode = radius_mode([d.r for d in detections])
    r_thr = r_mode / sca
    return [d for d in detections if abs(r_mode - d.r) <= r_thr]


def detect_balls(mask, cfg: ExtractionConfig | None = None) -> list[BallDetection]:
    cfg = cfg or ExtractionConfig()
    regions = connected_components(mask, connectivity=8)
    found = []
    for k in range(1, regions.count + 1):
        if regions.areas[k - 1] < cfg.min_area:
            continue
        r0, c0, r1, c1 = regions.bboxes[k - 1]
        sub = regions.labels[r0:r1, c0:c1] == k
        try:
            fit = fit_circle(sub)
        except CircleFitError:
            continue
        if fit.relative_residual > cfg.max_rel_residual:
            continue
        found.append(BallDetection(fit.cx + c0, fit.cy + r0, fit.r, residual=fit.residual))
    if not found:
        log.warning("no candidate circles found")
        return []
    return filter_by_radius(found, cfg.sca)


# ---------------------------------------------------------------------------
# Grid clustering and interpolation
# ---------------------------------------------------------------------------


def _cluster_1d(values, gap: float) -> list[list[int]]:
    order = np.argsort(values, kind="stable")
    clusters: list[list[int]] = []
    last = None
    for i in order:
        if last is None or values[i] - last > gap:
            clusters.append([])
        clusters[-1].append(int(i))
        last = values[i]
    return clusters


def _spacings(balls, clusters, axis: str) -> list[float]:
    out = []
    for members in clusters:
        pos = sorted(getattr(balls[i], axis) for i in members)
        out.extend(np.diff(pos).tolist())
    return out


def cluster_grid(detections: list[BallDetection], r_mode: float | None = None) -> BallGrid:
    """Group balls into rows (by cy) and columns (by cx).

    A new cluster starts wherever the sorted coordinate jumps by more than
    ``r_mode``.  The reference pitch per axis is the median neighbour spacing
    inside the clusters; it is None when no cluster has two members.
    """
    balls = [replace(d) for d in detections]
    if not balls:
        return BallGrid([])
    if r_mode is None:
        r_mode = radius_mode([d.r for d in balls])
    cy = np.array([d.cy for d in balls])
    cx = np.array([d.cx for d in balls])
    rows = _cluster_1d(cy, r_mode)
    cols = _cluster_1d(cx, r_mode)
    for rid, members in enumerate(rows):
        for i in members:
            balls[i].row_id = rid
    for cid, members in enumerate(cols):
        for i in members:
            balls[i].col_id = cid
    sh = _spacings(balls, rows, "cx")
    sv = _spacings(balls, cols, "cy")
    d_h = float(np.median(sh)) if sh else None
    d_v = float(np.median(sv)) if sv else None
    if d_h is None and d_v is None:
        log.warning("reference distance undefined: no cluster has two balls")
    return BallGrid(balls, rows, cols, d_h, d_v, float(r_mode))


def _gap_fills(balls, clusters, axis: str, d_ref: float | None, r: float) -> list[BallDetection]:
    if not d_ref:
        return []
    out = []
    for members in clusters:
        ordered = sorted(members, key=lambda i: getattr(balls[i], axis))
        for a, b in zip(ordered, ordered[1:]):
            pa, pb = balls[a], balls[b]
            d = getattr(pb, axis) - getattr(pa, axis)
            k = int(round(d / d_ref))
            for j in range(1, k):
                t = j / k
                out.append(
                    BallDetection(
                        pa.cx + t * (pb.cx - pa.cx),
                        pa.cy + t * (pb.cy - pa.cy),
                        r,
                        source=INTERPOLATED,
                    )
                )
    return out


def interpolate_missing(grid: BallGrid, shape=None) -> list[BallDetection]:
    """Fill within-cluster gaps of ``k * d_ref`` (k >= 2) with k - 1 balls.

    A ball missing from both its row and its column is proposed twice; such
    proposals closer than ``r_mode`` are merged by averaging.  With ``shape``
    given, proposals outside the board are dropped.
    """
    props = _gap_fills(grid.balls, grid.rows, "cx", grid.d_ref_h, grid.r_mode)
    props += _gap_fills(grid.balls, grid.cols, "cy", grid.d_ref_v, grid.r_mode)
    merged: list[list[BallDetection]] = []
    for p in props:
        for group in merged:
            g = group[0]
            if math.hypot(g.cx - p.cx, g.cy - p.cy) <= grid.r_mode:
                group.append(p)
                break
        else:
            merged.append([p])
    out = []
    for group in merged:
        cx = float(np.mean([g.cx for g in group]))
        cy = float(np.mean([g.cy for g in group]))
        if shape is not None and not (0 <= cx < shape[1] and 0 <= cy < shape[0]):
            continue
        out.append(BallDetection(cx, cy, grid.r_mode, source=INTERPOLATED))
    return out


# ---------------------------------------------------------------------------
# Template refinement
# ---------------------------------------------------------------------------


def _offsets(sr: int):
    offs = [(dy, dx) for dy in range(-sr, sr + 1) for dx in range(-sr, sr + 1)]
    # tie-break order: smaller magnitude first, then raster order
    return sorted(offs, key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))


def refine_by_template(
    board, grid: BallGrid, candidate: BallDetection, cfg: ExtractionConfig | None = None
) -> BallDetection:
    """Exhaustive SSD search around an interpolated location.

    The template is the board patch around the nearest detected ball.  Every
    integer offset in ``[-SR, SR]^2`` is scored; the lowest sum of squared
    differences wins, ties going to the smallest offset then raster order.
    Offsets whose window leaves the board are skipped and noted.
    """
    cfg = cfg or ExtractionConfig()
    board = as_gray(board)
    refs = [b for b in grid.balls if b.source == DETECTED]
    if not refs:
        raise ValueError("template refinement needs at least one detected ball")
    ref = min(refs, key=lambda b: (b.cx - candidate.cx) ** 2 + (b.cy - candidate.cy) ** 2)
    half = int(math.ceil(grid.r_mode or ref.r)) + 2
    h, w = board.shape
    rx, ry = int(round(ref.cx)), int(round(ref.cy))
    tpl = np.zeros((2 * half + 1, 2 * half + 1), dtype=np.int64)
    ys, xs = slice(max(ry - half, 0), min(ry + half + 1, h)), slice(max(rx - half, 0), min(rx + half + 1, w))
    tpl[ys.start - (ry - half) : ys.stop - (ry - half), xs.start - (rx - half) : xs.stop - (rx - half)] = board[ys, xs]

    gx, gy = int(round(candidate.cx)), int(round(candidate.cy))
    best, best_off, clipped = None, (0, 0), False
    for dy, dx in _offsets(cfg.search_range):
        y0, x0 = gy + dy - half, gx + dx - half
        if y0 < 0 or x0 < 0 or y0 + tpl.shape[0] > h or x0 + tpl.shape[1] > w:
            clipped = True
            continue
        win = board[y0 : y0 + tpl.shape[0], x0 : x0 + tpl.shape[1]].astype(np.int64)
        ssd = int(((win - tpl) ** 2).sum())
        if best is None or ssd < best:
            best, best_off = ssd, (dy, dx)
    note = "search window clipped at board edge" if clipped else ""
    if best is None:
        return replace(candidate, note="no valid search window")
    dy, dx = best_off
    return replace(
        candidate,
        cx=gx + dx + (ref.cx - rx),
        cy=gy + dy + (ref.cy - ry),
        source=REFINED,
        prior=(candidate.cx, candidate.cy),
        note=note,
    )


# ---------------------------------------------------------------------------
# Full pipeline and crops
# ---------------------------------------------------------------------------


def extract_balls(board, cfg: ExtractionConfig | None = None) -> BallGrid:
    """Run the whole extraction and return the final, re-clustered grid."""
    cfg = cfg or ExtractionConfig()
    board = as_gray(board)
    mask = slice_and_threshold(board, cfg)
    found = detect_balls(mask, cfg)
    if not found:
        return BallGrid([])
    grid = cluster_grid(found)
    fills = interpolate_missing(grid, board.shape) if len(found) > 1 else []
    refined = [refine_by_template(board, grid, c, cfg) for c in fills]
    final = cluster_grid(grid.balls + refined, grid.r_mode)
    # keep the pitch measured on detected balls only
    final.d_ref_h, final.d_ref_v = grid.d_ref_h, grid.d_ref_v
    return final


@dataclass
class BallCrop:
    image: np.ndarray
    ball: BallDetection
    cx: float  # ball centre in crop coordinates
    cy: float

    @property
    def disc(self) -> np.ndarray:
        return disc_mask(self.image.shape, self.cx, self.cy, self.ball.r)


def crop_ball(board, ball: BallDetection, size: int = 64) -> BallCrop:
    """Zero-padded ``size`` x ``size`` window whose centre pixel is the ball's."""
    board = as_gray(board)
    h, w = board.shape
    gx, gy = int(round(ball.cx)), int(round(ball.cy))
    y0, x0 = gy - size // 2, gx - size // 2
    out = np.zeros((size, size), dtype=np.uint8)
    ys = slice(max(y0, 0), min(y0 + size, h))
    xs = slice(max(x0, 0), min(x0 + size, w))
    if ys.start < ys.stop and xs.start < xs.stop:
        out[ys.start - y0 : ys.stop - y0, xs.start - x0 : xs.stop - x0] = board[ys, xs]
    return BallCrop(out, ball, ball.cx - x0, ball.cy - y0)


def extract_crops(board, grid: BallGrid, cfg: ExtractionConfig | None = None) -> list[BallCrop]:
    cfg = cfg or ExtractionConfig()
    if grid.r_mode and cfg.crop_size < 2 * grid.r_mode:
        log.warning("crop size %d smaller than ball diameter %.1f", cfg.crop_size, 2 * grid.r_mode)
    return [crop_ball(board, b, cfg.crop_size) for b in grid.balls]


def crop_name(board_id, ball: BallDetection) -> str:
    return f"board_{board_id}_ball_{ball.row_id}_{ball.col_id}.png"


def write_extraction(board_id, board, grid: BallGrid, out_dir, cfg: ExtractionConfig | None = None) -> list[Path]:
    """Write crops plus ``detections.jsonl`` and ``balls.jsonl`` to ``out_dir``.

    ``balls.jsonl`` maps each crop file to its ball disc in crop coordinates.
    Both files are appended to, so several boards can share one directory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with open(out_dir / "detections.jsonl", "a") as det, open(out_dir / "balls.jsonl", "a") as balls:
        for crop in extract_crops(board, grid, cfg):
            name = crop_name(board_id, crop.ball)
            paths.append(save_image(crop.image, out_dir / name))
            det.write(json.dumps({"board": str(board_id), **crop.ball.to_record()}) + "\n")
            balls.write(json.dumps({"file": name, "cx": crop.cx, "cy": crop.cy, "r": crop.ball.r}) + "\n")
    return paths
