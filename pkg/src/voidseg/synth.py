"""Synthetic circular voids on non-void ball crops, and synthetic boards.

Each generated sample is a pure function of ``(crop pool, config, index)``:
the per-sample generator is seeded from ``(master_seed, index)`` so samples
can be produced in any order or in parallel.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .extraction import DETECTED, BallCrop, BallDetection, BallGrid, cluster_grid
from .imaging import as_gray, disc_mask, gaussian_blur, save_image, save_mask

log = logging.getLogger(__name__)

THR_MIN = 6


@dataclass
class SynthConfig:
    VC_min: int = 1
    VC_max: int = 4
    VR_min: int = 2
    VR_max: int = 7
    VI_min: int = 6
    VI_max: int = 9
    VB_min: float = 2.0
    VB_max: float = 3.0
    VN_min: float = 1.0
    VN_max: float = 2.0
    I_max: int = 20000
    H: int = 64
    W: int = 64
    master_seed: int = 0
    resample_empty: bool = False
    max_resample: int = 100

    def validate(self, thr_min: float = THR_MIN) -> SynthConfig:
        for name in ("VC", "VR", "VI", "VB", "VN"):
            lo, hi = getattr(self, f"{name}_min"), getattr(self, f"{name}_max")
            if lo > hi:
                raise ValueError(f"{name}_min > {name}_max ({lo} > {hi})")
            if lo < 0:
                raise ValueError(f"{name}_min must be non-negative")
        if self.VC_min < 1 or self.VR_min < 1:
            raise ValueError("VC_min and VR_min must be >= 1")
        if self.I_max < 0 or self.H < 1 or self.W < 1:
            raise ValueError("I_max, H and W must be positive")
        if self.VI_min < thr_min:
            warnings.warn(
                f"VI_min={self.VI_min} is below Thr_min={thr_min}; "
                "some generated voids will not count as valid",
                stacklevel=2,
            )
        return self


@dataclass
class VoidParams:
    count: int
    radius: list[int]
    intensity: list[int]
    blur: list[float]
    noise: list[float]
    x: list[float]
    y: list[float]

    def void(self, i: int) -> dict:
        return {
            "VR": self.radius[i],
            "VI": self.intensity[i],
            "VB": self.blur[i],
            "VN": self.noise[i],
            "VX": self.x[i],
            "VY": self.y[i],
        }


@dataclass
class SynthSample:
    image: np.ndarray
    mask: np.ndarray
    params: VoidParams
    kept: list[bool]
    seed: tuple[int, int] = (0, 0)
    source_index: int = -1

    @property
    def rejected_voids(self) -> int:
        return self.kept.count(False)

    def to_record(self) -> dict:
        return {
            "VC": self.params.count,
            "voids": [dict(self.params.void(i), kept=k) for i, k in enumerate(self.kept)],
            "rejected_voids": self.rejected_voids,
            "seed": list(self.seed),
            "source_index": self.source_index,
            "label": "void" if self.mask.any() else "non_void",
        }


def sample_params(cfg: SynthConfig, rng: np.random.Generator) -> VoidParams:
    vc = int(rng.integers(cfg.VC_min, cfg.VC_max + 1))
    return VoidParams(
        count=vc,
        radius=rng.integers(cfg.VR_min, cfg.VR_max + 1, size=vc).tolist(),
        intensity=rng.integers(cfg.VI_min, cfg.VI_max + 1, size=vc).tolist(),
        blur=rng.uniform(cfg.VB_min, cfg.VB_max, size=vc).tolist(),
        noise=rng.uniform(cfg.VN_min, cfg.VN_max, size=vc).tolist(),
        x=rng.uniform(0, cfg.W, size=vc).tolist(),
        y=rng.uniform(0, cfg.H, size=vc).tolist(),
    )


def _void_disc(shape, x, y, r):
    # pixels strictly closer than r to the void centre
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (xx - x) ** 2 + (yy - y) ** 2 < r * r


def render_voids(
    crop,
    ball: tuple[float, float, float],
    params: VoidParams,
    rng: np.random.Generator,
) -> SynthSample:
    """Paint the sampled voids onto a non-void crop.

    ``ball`` is (cx, cy, r) in crop coordinates.  Voids not fully contained
    in the ball are dropped.  Each kept void is an additive layer: its
    intensity plus zero-mean Gaussian noise of its variance on the pixels
    inside it.  Within a band of half-width VB around the void edge the layer
    is replaced by its blur with sigma VB, so the ball's own rim is never
    smeared into the void.
    """
    src = as_gray(crop)
    bx, by, br = ball
    img = src.astype(float)
    mask = np.zeros(src.shape, dtype=bool)
    yy, xx = np.mgrid[: src.shape[0], : src.shape[1]]
    kept = []
    for i in range(params.count):
        x, y, r = params.x[i], params.y[i], params.radius[i]
        ok = math.hypot(x - bx, y - by) + r <= br
        kept.append(ok)
        if not ok:
            continue
        d = _void_disc(src.shape, x, y, r)
        layer = np.zeros(src.shape)
        layer[d] = params.intensity[i]
        if params.noise[i] > 0:
            layer[d] += rng.normal(0.0, math.sqrt(params.noise[i]), size=int(d.sum()))
        sigma = params.blur[i]
        if sigma > 0:
            band = np.abs(np.hypot(xx - x, yy - y) - r) <= sigma
            layer = np.where(band, gaussian_blur(layer, sigma), layer)
        img += layer
        mask |= d
    out = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    # pixels no layer touched round back to their exact source value
    return SynthSample(out, mask, params, kept)


def _sample_seed(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(index)])


def generate_sample(pool: list[BallCrop], cfg: SynthConfig, index: int) -> SynthSample:
    rng = _sample_seed(cfg.master_seed, index)
    attempts = cfg.max_resample if cfg.resample_empty else 1
    for _ in range(attempts):
        j = int(rng.integers(len(pool)))
        crop = pool[j]
        params = sample_params(cfg, rng)
        sample = render_voids(crop.image, (crop.cx, crop.cy, crop.ball.r), params, rng)
        if sample.mask.any():
            break
    sample.seed = (int(cfg.master_seed), int(index))
    sample.source_index = j
    return sample


def generate_dataset(pool: list[BallCrop], cfg: SynthConfig | None = None, start: int = 0) -> list[SynthSample]:
    """Generate ``cfg.I_max`` samples from a pool of non-void crops.

    Crops are drawn uniformly with replacement.  Samples whose voids were all
    rejected are kept as non-void examples unless ``resample_empty`` is set.
    """
    cfg = (cfg or SynthConfig()).validate()
    if cfg.I_max == 0:
        return []
    if not pool:
        raise ValueError("empty crop pool")
    for c in pool:
        if c.image.shape != (cfg.H, cfg.W):
            raise ValueError(f"crop shape {c.image.shape} does not match H, W = {cfg.H}, {cfg.W}")
    return [generate_sample(pool, cfg, start + i) for i in range(cfg.I_max)]


def write_dataset(samples: list[SynthSample], out_dir, split: str = "train", prefix: str = "syn") -> Path:
    """Write images/, masks/ and manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for k, s in enumerate(samples):
            sid = f"{prefix}_{s.seed[1]:06d}" if s.seed else f"{prefix}_{k:06d}"
            img_rel, mask_rel = f"images/{sid}.png", f"masks/{sid}.png"
            save_image(s.image, out_dir / img_rel)
            save_mask(s.mask, out_dir / mask_rel)
            rec = {"id": sid, "image": img_rel, "mask": mask_rel, "split": split, "origin": "synthetic"}
            rec.update(s.to_record())
            fh.write(json.dumps(rec) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Synthetic boards
# ---------------------------------------------------------------------------


@dataclass
class BoardSpec:
    rows: int = 4
    cols: int = 5
    pitch: float = 100.0
    r_ball: float = 20.0
    background: float = 60.0
    ball_level: float = 160.0
    jitter: float = 0.0
    noise_sigma: float = 0.0
    edge_blur: float = 0.0
    occluded: list[tuple[int, int]] = field(default_factory=list)
    attenuation: float = 0.35  # intensity factor under an occluder
    margin: float | None = None
    seed: int = 0


def synthesize_board(spec: BoardSpec | None = None, **kw) -> tuple[np.ndarray, BallGrid]:
    """Uniform board with bright balls on a grid; returns (image, truth).

    Occluded balls sit under a dark rectangle that scales intensities by
    ``attenuation``; they stay in the returned ground truth.
    """
    spec = spec or BoardSpec(**kw)
    if spec.pitch < 2 * spec.r_ball:
        raise ValueError(f"pitch {spec.pitch} < ball diameter {2 * spec.r_ball}: discs overlap")
    rng = np.random.default_rng(spec.seed)
    margin = spec.margin if spec.margin is not None else spec.pitch / 2 + spec.jitter + 2
    h = int(math.ceil(2 * margin + (spec.rows - 1) * spec.pitch))
    w = int(math.ceil(2 * margin + (spec.cols - 1) * spec.pitch))
    img = np.full((h, w), spec.background, dtype=float)
    balls = []
    for i in range(spec.rows):
        for j in range(spec.cols):
            jx, jy = rng.uniform(-spec.jitter, spec.jitter, size=2) if spec.jitter else (0.0, 0.0)
            cx = margin + j * spec.pitch + jx
            cy = margin + i * spec.pitch + jy
            img[disc_mask(img.shape, cx, cy, spec.r_ball)] = spec.ball_level
            balls.append(BallDetection(cx, cy, spec.r_ball, DETECTED, i, j))
    if spec.edge_blur > 0:
        img = gaussian_blur(img, spec.edge_blur)
    for i, j in spec.occluded:
        b = balls[i * spec.cols + j]
        half = spec.r_ball + 3
        y0, y1 = max(int(b.cy - half), 0), min(int(math.ceil(b.cy + half)) + 1, h)
        x0, x1 = max(int(b.cx - half), 0), min(int(math.ceil(b.cx + half)) + 1, w)
        img[y0:y1, x0:x1] *= spec.attenuation
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    board = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    truth = cluster_grid(balls, spec.r_ball)
    return board, truth


def synthesize_crop_pool(
    n: int,
    seed: int = 0,
    size: int = 64,
    r_range=(18.0, 22.0),
    ball_range=(120.0, 190.0),
    background_range=(30.0, 80.0),
    noise_sigma: float = 1.0,
    edge_blur: float = 1.0,
) -> list[BallCrop]:
    """Stand-alone non-void ball crops with varied level, size and offset."""
    rng = np.random.default_rng(seed)
    pool = []
    for _ in range(n):
        r = rng.uniform(*r_range)
        cx = size / 2 + rng.uniform(-1.5, 1.5)
        cy = size / 2 + rng.uniform(-1.5, 1.5)
        img = np.full((size, size), rng.uniform(*background_range))
        img[disc_mask(img.shape, cx, cy, r)] = rng.uniform(*ball_range)
        if edge_blur > 0:
            img = gaussian_blur(img, edge_blur)
        if noise_sigma > 0:
            img += rng.normal(0.0, noise_sigma, size=img.shape)
        crop = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        pool.append(BallCrop(crop, BallDetection(cx, cy, r), cx, cy))
    return pool


def mask_components(mask) -> int:
    return int(ndimage.label(mask, structure=np.ones((3, 3)))[1])
