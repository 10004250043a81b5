"""Post-processing of predicted void maps and precision/recall scoring."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .imaging import as_gray, connected_components, disc_mask, save_image, trace_boundary

TABLE3_ROWS = ("Train_Real_Test_Real", "Train_Syn_Test_Real", "Train_Real_Syn_Test_Real")


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob > threshold``; an exact tie maps to 0."""
    return np.asarray(prob) > threshold


def split_regions(mask, connectivity: int = 8) -> list[np.ndarray]:
    comps = connected_components(mask, connectivity)
    return [comps.labels == k for k in range(1, comps.count + 1)]


@dataclass
class PredictionResult:
    ball_id: str
    mask: np.ndarray = field(repr=False)
    regions: list[np.ndarray] = field(repr=False)
    void_percentage: float

    @property
    def areas(self) -> list[int]:
        return [int(r.sum()) for r in self.regions]

    def to_record(self) -> dict:
        return {
            "ball_id": self.ball_id,
            "void_percentage": round(self.void_percentage, 4),
            "areas": self.areas,
        }


def filter_regions(mask, a_min: int = 9) -> list[np.ndarray]:
    """8-connected components of ``mask`` with area >= ``a_min``."""
    return [r for r in split_regions(mask, 8) if r.sum() >= a_min]


def void_percentage(regions, ball) -> float:
    """100 * (void pixels inside the ball) / (ball pixels).

    ``regions`` is a mask or a list of region masks; ``ball`` is a disc mask.
    """
    ball = np.asarray(ball, dtype=bool)
    area = int(ball.sum())
    if area == 0:
        raise ValueError("ball area is zero")
    if isinstance(regions, np.ndarray) and regions.ndim == 2:
        voids = regions.astype(bool)
    else:
        voids = np.zeros(ball.shape, dtype=bool)
        for r in regions:
            voids |= r
    return 100.0 * int((voids & ball).sum()) / area


def postprocess(prob, disc, threshold: float = 0.5, a_min: int = 9, ball_id: str = "") -> PredictionResult:
    """Binarize, drop small regions and measure the void percentage."""
    prob = np.asarray(prob)
    regions = filter_regions(binarize(prob, threshold), a_min)
    mask = np.zeros(prob.shape, dtype=bool)
    for r in regions:
        mask |= r
    ball = disc_mask(prob.shape, *disc)
    return PredictionResult(ball_id, mask, regions, void_percentage(regions, ball))


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def prf(tp: int, fp: int, fn: int) -> dict:
    """Precision, recall and F1 with undefined ratios reported as 0 and flagged."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    flags = []
    if tp + fp == 0:
        flags.append("precision_undefined")
    if tp + fn == 0:
        flags.append("recall_undefined")
    return {"precision": p, "recall": r, "f1": f1, "flags": flags}


def f1_from_pr(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def iou(a, b) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def match_regions(pred: list[np.ndarray], gt: list[np.ndarray], iou_min: float = 0.3):
    """Greedy one-to-one matching by descending IoU.

    Returns (matches, unmatched_pred, unmatched_gt) where matches holds
    (pred_index, gt_index, iou).  Pairs below ``iou_min`` never match; exact
    IoU ties resolve by (gt index, pred index).
    """
    pairs = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            v = iou(p, g)
            if v >= iou_min and v > 0:
                pairs.append((-v, j, i))
    pairs.sort()
    used_p, used_g, matches = set(), set(), []
    for neg, j, i in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((i, j, -neg))
    return (
        matches,
        [i for i in range(len(pred)) if i not in used_p],
        [j for j in range(len(gt)) if j not in used_g],
    )


@dataclass
class BallScore:
    ball_id: str
    tp: int
    fp: int
    fn: int
    px_tp: int
    px_fp: int
    px_fn: int
    ious: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    name: str
    iou_min: float
    a_min: int | None
    threshold: float | None
    balls: list[BallScore]

    def _sum(self, attr):
        return sum(getattr(b, attr) for b in self.balls)

    @property
    def region(self) -> dict:
        tp, fp, fn = self._sum("tp"), self._sum("fp"), self._sum("fn")
        return {"tp": tp, "fp": fp, "fn": fn, **prf(tp, fp, fn)}

    @property
    def pixel(self) -> dict:
        tp, fp, fn = self._sum("px_tp"), self._sum("px_fp"), self._sum("px_fn")
        return {"tp": tp, "fp": fp, "fn": fn, **prf(tp, fp, fn)}

    @property
    def precision(self) -> float:
        return self.region["precision"]

    @property
    def recall(self) -> float:
        return self.region["recall"]

    @property
    def f1(self) -> float:
        return self.region["f1"]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "matching": {"rule": "greedy_iou_one_to_one", "iou_min": self.iou_min, "connectivity": 8},
            "a_min": self.a_min,
            "threshold": self.threshold,
            "region": self.region,
            "pixel": self.pixel,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "balls": [asdict(b) for b in self.balls],
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path


def score_ball(pred_mask, gt_mask, iou_min: float = 0.3, ball_id: str = "") -> BallScore:
    pred_mask = np.asarray(pred_mask, dtype=bool)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    matches, up, ug = match_regions(split_regions(pred_mask), split_regions(gt_mask), iou_min)
    return BallScore(
        ball_id,
        tp=len(matches),
        fp=len(up),
        fn=len(ug),
        px_tp=int((pred_mask & gt_mask).sum()),
        px_fp=int((pred_mask & ~gt_mask).sum()),
        px_fn=int((~pred_mask & gt_mask).sum()),
        ious=[round(m[2], 4) for m in matches],
    )


def match_and_score(
    predictions: dict,
    ground_truth: dict,
    iou_min: float = 0.3,
    name: str = "",
    a_min: int | None = None,
    threshold: float | None = None,
) -> EvalReport:
    """Score binary masks keyed by ball id against ground-truth masks.

    Predictions are expected to be post-processed already; ``a_min`` and
    ``threshold`` are recorded as metadata only.
    """
    missing = sorted(set(ground_truth) ^ set(predictions))
    if missing:
        raise ValueError(f"prediction and ground-truth ball sets differ: {missing[:5]}")
    balls = [score_ball(predictions[k], ground_truth[k], iou_min, str(k)) for k in sorted(ground_truth)]
    return EvalReport(name, iou_min, a_min, threshold, balls)


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())


def format_table(reports, level: str = "region") -> str:
    """Aligned text table, one row per report: name, precision, recall, F1."""
    rows = []
    for rep in reports:
        d = rep.to_dict() if isinstance(rep, EvalReport) else rep
        m = d[level]
        rows.append((d["name"], f"{m['precision']:.2f}", f"{m['recall']:.2f}", f"{m['f1']:.2f}"))
    head = ("", "Precision", "Recall", "F1 score")
    widths = [max(len(r[i]) for r in rows + [head]) for i in range(4)]
    lines = [" | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(head, widths)))]
    lines.append("-+-".join("-" * w for w in widths))
    for r in rows:
        lines.append(" | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Overlay
# ---------------------------------------------------------------------------


def render_overlay(board, crops, results: list[PredictionResult], path=None) -> np.ndarray:
    """Outline voids on the board and print each ball's void percentage.

    ``crops`` are the BallCrop objects the results were computed from, in the
    same order.  Contours and labels are drawn in white.
    """
    board = as_gray(board)
    out = board.copy()
    h, w = out.shape
    for crop, res in zip(crops, results):
        size = crop.image.shape[0]
        y0 = int(round(crop.ball.cy)) - size // 2
        x0 = int(round(crop.ball.cx)) - size // 2
        for region in res.regions:
            pts = trace_boundary(region)
            ys, xs = pts[:, 0] + y0, pts[:, 1] + x0
            ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
            out[ys[ok], xs[ok]] = 255
    im = Image.fromarray(out, mode="L")
    draw = ImageDraw.Draw(im)
    font = ImageFont.load_default()
    for crop, res in zip(crops, results):
        text = f"{res.void_percentage:.1f}"
        x0, y0, x1, y1 = draw.textbbox((0, 0), text, font=font)
        tx = crop.ball.cx - (x1 - x0) / 2
        ty = crop.ball.cy - crop.ball.r - (y1 - y0) - 3
        draw.text((tx, max(ty, 0)), text, fill=255, font=font)
    arr = np.array(im, dtype=np.uint8)
    if path is not None:
        save_image(arr, path)
    return arr


def overlay_labels(crops, results) -> list[tuple[str, float, float]]:
    """The (text, x, y) labels ``render_overlay`` draws, for inspection."""
    return [
        (f"{res.void_percentage:.1f}", crop.ball.cx, crop.ball.cy - crop.ball.r)
        for crop, res in zip(crops, results)
    ]
