"""Void / non-void labelling of ball crops.

Regions come either from closed LoG contours or from imported manual masks;
a region only counts as a void when its mean intensity exceeds that of its
surroundings by at least ``thr_min``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import (
    Contour,
    as_gray,
    connected_components,
    disc_mask,
    fit_circle,
    laplacian_of_gaussian,
    load_image,
    load_mask,
    otsu_threshold,
)

log = logging.getLogger(__name__)

VOID, NON_VOID = "void", "non_void"
AUTO_LOG, MANUAL_MASK = "auto_log", "manual_mask"


@dataclass
class LabelConfig:
    thr_min: float = 6.0
    log_sigma: float = 2.0
    log_floor: float = 1.0
    ring_width: float = 3.0
    rim_margin: float = 2.0  # LoG ignores this many pixels inside the ball rim


@dataclass
class VoidRegion:
    label: int
    mask: np.ndarray = field(repr=False)
    i_void: float
    i_bg: float
    valid: bool

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def contrast(self) -> float:
        return self.i_void - self.i_bg

    def to_record(self) -> dict:
        return {
            "area": self.area,
            "I_void": round(self.i_void, 4),
            "I_BG": round(self.i_bg, 4) if np.isfinite(self.i_bg) else None,
            "valid": self.valid,
        }


@dataclass
class BallLabel:
    ball_id: str
    cls: str
    regions: list[VoidRegion]
    source: str
    open_contours: int = 0

    @property
    def valid_regions(self) -> list[VoidRegion]:
        return [r for r in self.regions if r.valid]

    def to_record(self) -> dict:
        rec = {
            "ball_id": self.ball_id,
            "class": self.cls,
            "regions": [r.to_record() for r in self.regions],
            "source": self.source,
        }
        if self.open_contours:
            rec["open_contours"] = self.open_contours
        return rec


Disc = tuple  # (cx, cy, r) in crop coordinates


def estimate_ball_disc(crop) -> Disc:
    """Circle of the largest Otsu foreground blob, used when no disc is known."""
    crop = as_gray(crop)
    _, fg = otsu_threshold(crop)
    regions = connected_components(fg)
    if regions.count == 0:
        h, w = crop.shape
        return (w / 2, h / 2, min(h, w) / 2)
    k = int(np.argmax(regions.areas)) + 1
    fit = fit_circle(regions.labels == k)
    return (fit.cx, fit.cy, fit.r)


def contours_from_log(crop, disc: Disc, cfg: LabelConfig | None = None) -> list[Contour]:
    """LoG contours of bright structures inside the ball.

    Pixels outside the analysis disc (ball radius minus ``rim_margin``) are
    replaced by the median ball intensity first, so the ball's own rim does
    not respond.  Lobes cut by the analysis disc give open contours.
    """
    cfg = cfg or LabelConfig()
    crop = as_gray(crop)
    cx, cy, r = disc
    inside = disc_mask(crop.shape, cx, cy, max(r - cfg.rim_margin, 1.0))
    if not inside.any():
        return []
    filled = crop.astype(float)
    filled[~inside] = np.median(filled[inside])
    return laplacian_of_gaussian(filled, cfg.log_sigma, cfg.log_floor, within=inside).contours


def region_intensities(
    crop, region, ball, others=None, ring_width: float = 3.0
) -> tuple[float, float]:
    """(I_void, I_BG) for one region.

    I_BG averages a ring of ``ring_width`` pixels around the region, kept
    inside the ball and away from every void in ``others``.  When that ring is
    empty the rest of the ball is used; NaN when nothing is left.
    """
    crop = np.asarray(crop, dtype=float)
    region = np.asarray(region, dtype=bool)
    ball = np.asarray(ball, dtype=bool)
    voids = region.copy()
    if others is not None:
        voids |= np.asarray(others, dtype=bool)
    i_void = float(crop[region].mean())
    dist = ndimage.distance_transform_edt(~region)
    ring = (dist > 0) & (dist <= ring_width) & ball & ~voids
    if not ring.any():
        ring = ball & ~voids
    i_bg = float(crop[ring].mean()) if ring.any() else float("nan")
    return i_void, i_bg


def _regions_from_masks(crop, masks: list[np.ndarray], ball, cfg: LabelConfig) -> list[VoidRegion]:
    union = np.zeros(crop.shape, dtype=bool)
    for m in masks:
        union |= m
    out = []
    for k, m in enumerate(masks, start=1):
        i_void, i_bg = region_intensities(crop, m, ball, union & ~m, cfg.ring_width)
        valid = bool(np.isfinite(i_bg) and i_void - i_bg >= cfg.thr_min)
        out.append(VoidRegion(k, m, i_void, i_bg, valid))
    return out


def classify_ball(
    crop,
    disc: Disc,
    contours: list[Contour] | None = None,
    mask=None,
    cfg: LabelConfig | None = None,
    ball_id: str = "",
) -> BallLabel:
    """Void iff some closed contour (or mask blob) encloses a valid region.

    With neither ``contours`` nor ``mask`` given, LoG contours are computed.
    Open contours are counted but never closed automatically.
    """
    cfg = cfg or LabelConfig()
    crop = as_gray(crop)
    ball = disc_mask(crop.shape, *disc)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != crop.shape:
            raise ValueError(f"mask shape {mask.shape} != crop shape {crop.shape}")
        comps = connected_components(mask, connectivity=8)
        masks = [comps.labels == k for k in range(1, comps.count + 1)]
        regions = _regions_from_masks(crop, masks, ball, cfg)
        source, n_open = MANUAL_MASK, 0
    else:
        if contours is None:
            contours = contours_from_log(crop, disc, cfg)
        closed = [c for c in contours if c.closed]
        regions = _regions_from_masks(crop, [c.region for c in closed], ball, cfg)
        source, n_open = AUTO_LOG, len(contours) - len(closed)
    cls = VOID if any(r.valid for r in regions) else NON_VOID
    return BallLabel(ball_id, cls, regions, source, n_open)


def read_disc_index(crop_dir) -> dict[str, Disc]:
    """Ball discs written next to extracted crops (``balls.jsonl``), if any."""
    path = Path(crop_dir) / "balls.jsonl"
    if not path.exists():
        return {}
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["file"]] = (rec["cx"], rec["cy"], rec["r"])
    return out


def label_crops(crop_dir, cfg: LabelConfig | None = None) -> list[BallLabel]:
    """Automatic LoG labelling of every PNG crop in ``crop_dir``."""
    crop_dir = Path(crop_dir)
    discs = read_disc_index(crop_dir)
    out = []
    for path in sorted(crop_dir.glob("*.png")):
        crop = load_image(path)
        disc = discs.get(path.name) or estimate_ball_disc(crop)
        out.append(classify_ball(crop, disc, cfg=cfg, ball_id=path.stem))
    return out


def import_manual_masks(crop_dir, mask_dir, cfg: LabelConfig | None = None) -> list[BallLabel]:
    """Labels from hand-drawn {0, 255} masks matched to crops by file name.

    Every mask needs a crop of the same name and size; crops without a mask
    are skipped with a warning.  Validity against ``thr_min`` still applies,
    but no minimum-area filtering happens here.
    """
    crop_dir, mask_dir = Path(crop_dir), Path(mask_dir)
    crops = {p.name: p for p in sorted(crop_dir.glob("*.png"))}
    masks = {p.name: p for p in sorted(mask_dir.glob("*.png"))}
    orphans = sorted(set(masks) - set(crops))
    if orphans:
        raise ValueError(f"masks without a matching crop: {', '.join(orphans)}")
    discs = read_disc_index(crop_dir)
    out = []
    for name, cpath in crops.items():
        if name not in masks:
            log.warning("no mask for crop %s; skipped", name)
            continue
        crop = load_image(cpath)
        mask = load_mask(masks[name])
        if mask.shape != crop.shape:
            raise ValueError(f"{name}: mask size {mask.shape[::-1]} != crop size {crop.shape[::-1]}")
        disc = discs.get(name) or estimate_ball_disc(crop)
        out.append(classify_ball(crop, disc, mask=mask, cfg=cfg, ball_id=Path(name).stem))
    return out


def write_labels(labels: list[BallLabel], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.to_record()) + "\n")
    return path
