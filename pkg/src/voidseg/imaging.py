"""Low-level imaging primitives shared by the rest of the package.

Images are plain 2-D ``uint8`` numpy arrays and masks are 2-D ``bool``
arrays.  Every function here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage


class ImageFormatError(ValueError):
    """Raised for files that are not 8-bit single-channel images."""


class CircleFitError(ValueError):
    """Raised when a region's boundary cannot define a circle."""


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def as_gray(img) -> np.ndarray:
    """Validate and return ``img`` as a 2-D uint8 array (no rescaling)."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ImageFormatError(
            f"expected a 2-D grayscale image, got shape {arr.shape}; "
            "convert colour input to luminance first"
        )
    if arr.size == 0:
        raise ImageFormatError("image is empty")
    if arr.dtype == np.uint8:
        return arr
    if arr.dtype == bool:
        return arr.astype(np.uint8) * 255
    if np.any(arr < 0) or np.any(arr > 255):
        raise ImageFormatError("pixel values must lie in [0, 255]")
    return np.rint(arr).astype(np.uint8)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode == "1":
                im = im.convert("L")
            elif mode != "L":
                raise ImageFormatError(
                    f"{path.name}: mode {mode!r} is not 8-bit grayscale; "
                    "convert it first, e.g. PIL Image.convert('L')"
                )
            return np.array(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path.name}: unsupported image format") from exc


def save_image(img, path) -> Path:
    """Write ``img`` as an 8-bit grayscale PNG (lossless)."""
    path = Path(path)
    arr = as_gray(img)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
    return path


def save_mask(mask, path) -> Path:
    """Masks live on disk as {0, 255} PNGs."""
    return save_image(np.asarray(mask, dtype=bool).astype(np.uint8) * 255, path)


def load_mask(path) -> np.ndarray:
    arr = load_image(path)
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 255))):
        raise ImageFormatError(f"{Path(path).name}: mask values must be 0 or 255")
    return arr == 255


def disc_mask(shape, cx: float, cy: float, r: float) -> np.ndarray:
    """Pixels whose centre lies within distance ``r`` of (cx, cy)."""
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


# ---------------------------------------------------------------------------
# Otsu
# ---------------------------------------------------------------------------


def otsu_threshold(img, invert: bool = False) -> tuple[int, np.ndarray]:
    """Otsu's threshold over the 256-bin histogram.

    The between-class variance is compared exactly (rational arithmetic), so
    the returned level is the smallest maximiser.  Foreground is
    ``pixel > threshold`` (``pixel <= threshold`` with ``invert``).

    A constant image has no separating level; its value is returned together
    with an empty foreground.
    """
    arr = as_gray(img)
    hist = np.bincount(arr.ravel(), minlength=256).astype(object)
    levels = np.flatnonzero(np.bincount(arr.ravel(), minlength=256))
    if len(levels) == 1:
        t = int(levels[0])
        return t, np.zeros(arr.shape, dtype=bool)

    n = int(arr.size)
    total = int(np.dot(np.arange(256, dtype=np.int64), np.bincount(arr.ravel(), minlength=256)))
    best_t, best = 0, Fraction(-1)
    n0 = s0 = 0
    for t in range(256):
        n0 += int(hist[t])
        s0 += t * int(hist[t])
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        # N^2 * w0 * w1 * (mu0 - mu1)^2 == (N*S0 - N0*S)^2 / (N0*N1)
        score = Fraction((n * s0 - n0 * total) ** 2, n0 * n1)
        if score > best:
            best, best_t = score, t
    mask = arr > best_t
    return best_t, ~mask if invert else mask


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected borders, returned as float64.

    Kernel radius is ``ceil(3 * sigma)``; ``sigma == 0`` returns a copy.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    out = np.asarray(img, dtype=float).copy()
    if sigma == 0:
        return out
    k = gaussian_kernel(sigma)
    for axis in (0, 1):
        out = ndimage.correlate1d(out, k, axis=axis, mode="reflect")
    return out


_LAPLACE_5PT = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=float)


def log_response(img, sigma: float) -> np.ndarray:
    """Scale-normalised Laplacian of Gaussian, ``sigma**2 * lap(G * img)``.

    The sigma**2 factor keeps the response in luminance units, so a step of
    height h produces extrema of roughly 0.2 * h regardless of sigma.
    Bright blobs give negative responses.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    smooth = gaussian_blur(img, sigma)
    return sigma**2 * ndimage.correlate(smooth, _LAPLACE_5PT, mode="reflect")


# ---------------------------------------------------------------------------
# Regions and contours
# ---------------------------------------------------------------------------


@dataclass
class LabeledRegions:
    labels: np.ndarray  # 0 = background, 1..K
    areas: np.ndarray
    bboxes: list  # (row0, col0, row1, col1), half-open
    centroids: np.ndarray  # (K, 2) as (row, col)

    @property
    def count(self) -> int:
        return len(self.areas)

    def mask(self, k: int) -> np.ndarray:
        return self.labels == k


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(mask, connectivity: int = 8) -> LabeledRegions:
    """Label foreground components; labels follow raster order of first pixel."""
    mask = np.asarray(mask, dtype=bool)
    labels, k = ndimage.label(mask, structure=_structure(connectivity))
    labels = labels.astype(np.int32)
    if k == 0:
        return LabeledRegions(labels, np.zeros(0, dtype=np.int64), [], np.zeros((0, 2)))
    idx = np.arange(1, k + 1)
    areas = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    slices = ndimage.find_objects(labels)
    bboxes = [(s[0].start, s[1].start, s[0].stop, s[1].stop) for s in slices]
    centroids = np.array(ndimage.center_of_mass(mask, labels, idx)).reshape(k, 2)
    return LabeledRegions(labels, areas, bboxes, centroids)


# Clockwise ring starting west, in (drow, dcol); rows grow downwards.
_RING = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]
_RING_INDEX = {d: i for i, d in enumerate(_RING)}


def trace_boundary(region) -> np.ndarray:
    """Moore-neighbour trace of a single 8-connected region.

    Returns an (N, 2) array of (row, col) boundary pixels in clockwise order,
    starting at the first region pixel in raster order.  The start is not
    repeated at the end.
    """
    region = np.asarray(region, dtype=bool)
    pad = np.pad(region, 1)
    rows, cols = np.nonzero(pad)
    if len(rows) == 0:
        return np.zeros((0, 2), dtype=int)
    start = (int(rows[0]), int(cols[0]))
    chain = [start]
    p, back = start, 0
    first_move = None
    while True:
        for k in range(8):
            d = (back + k) % 8
            q = (p[0] + _RING[d][0], p[1] + _RING[d][1])
            if pad[q]:
                break
        else:
            break  # isolated pixel
        move = (p, q)
        if first_move is None:
            first_move = move
        elif move == first_move:
            break
        prev = _RING[(d - 1) % 8]
        bpix = (p[0] + prev[0], p[1] + prev[1])
        back = _RING_INDEX[(bpix[0] - q[0], bpix[1] - q[1])]
        p = q
        chain.append(p)
    if len(chain) > 1 and chain[-1] == start:
        chain.pop()
    return np.array(chain, dtype=int) - 1


def _are_neighbors(a, b) -> bool:
    return max(abs(int(a[0]) - int(b[0])), abs(int(a[1]) - int(b[1]))) <= 1


@dataclass
class Contour:
    """Ordered 8-connected pixel chain as (row, col) points.

    ``region`` holds the pixels the chain bounds; ``closed`` is False when the
    region was cut by the image edge or by the analysis area.
    """

    points: np.ndarray
    closed: bool
    region: np.ndarray | None = field(default=None, repr=False)
    strength: float = 0.0

    @property
    def centroid(self) -> tuple[float, float]:
        """(x, y) mean of the chain points."""
        return float(self.points[:, 1].mean()), float(self.points[:, 0].mean())

    def __len__(self) -> int:
        return len(self.points)


def _open_chain(chain: np.ndarray, cut: np.ndarray) -> np.ndarray:
    """Drop chain points flagged in ``cut`` and keep the longest cyclic run."""
    keep = ~cut
    if keep.all() or not keep.any():
        return chain if keep.all() else chain[:0]
    # rotate so the chain starts right after a cut point
    first_cut = int(np.flatnonzero(cut)[0])
    order = np.roll(np.arange(len(chain)), -(first_cut + 1))
    best, run = [], []
    for i in order:
        if keep[i]:
            run.append(i)
        else:
            if len(run) > len(best):
                best = run
            run = []
    if len(run) > len(best):
        best = run
    out = chain[best]
    while len(out) >= 2 and _are_neighbors(out[0], out[-1]):
        out = out[:-1]  # an open chain must not close on itself
    return out


def zero_crossing_contours(response, floor: float = 1.0, within=None) -> list[Contour]:
    """Contours around the negative lobes of a LoG response.

    Each 4-connected component of ``response < 0`` (inside ``within``) is a
    candidate.  Its zero-crossing strength is the mean, over its boundary
    pixels, of the largest response step to an outside 4-neighbour; lobes
    weaker than ``floor`` are discarded.  Lobes touching the image edge or
    the edge of ``within`` give open contours.
    """
    resp = np.asarray(response, dtype=float)
    h, w = resp.shape
    area = np.ones_like(resp, dtype=bool) if within is None else np.asarray(within, bool)
    neg = (resp < 0) & area
    regions = connected_components(neg, connectivity=4)
    # outside-area pixels count as clipping; pad the area with False
    area_pad = np.pad(area, 1)
    contours = []
    for k in range(1, regions.count + 1):
        reg = regions.labels == k
        r0, c0, r1, c1 = regions.bboxes[k - 1]
        # boundary strength: step to the strongest positive 4-neighbour
        steps = np.zeros_like(resp)
        inner = np.zeros_like(reg)
        for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            shifted_reg = np.zeros_like(reg)
            shifted_resp = np.zeros_like(resp)
            src = (slice(max(dr, 0), h + min(dr, 0)), slice(max(dc, 0), w + min(dc, 0)))
            dst = (slice(max(-dr, 0), h + min(-dr, 0)), slice(max(-dc, 0), w + min(-dc, 0)))
            shifted_reg[dst] = reg[src]
            shifted_resp[dst] = resp[src]
            valid = np.zeros_like(reg)
            valid[dst] = area[src]
            edge = reg & ~shifted_reg & valid
            inner |= reg & ~shifted_reg
            steps = np.where(edge, np.maximum(steps, shifted_resp - resp), steps)
        edge_px = inner & (steps > 0)
        strength = float(steps[edge_px].mean()) if edge_px.any() else 0.0
        if strength < floor:
            continue
        chain = trace_boundary(reg)
        # a chain point is "cut" when one of its 4-neighbours leaves the area
        pr, pc = chain[:, 0] + 1, chain[:, 1] + 1
        cut = (
            ~area_pad[pr - 1, pc]
            | ~area_pad[pr + 1, pc]
            | ~area_pad[pr, pc - 1]
            | ~area_pad[pr, pc + 1]
        )
        clipped = bool(cut.any())
        if clipped:
            chain = _open_chain(chain, cut)
            if len(chain) == 0:
                continue
        closed = (
            not clipped and len(chain) >= 4 and _are_neighbors(chain[0], chain[-1])
        )
        contours.append(Contour(chain, closed, reg, strength))
    return contours


@dataclass
class LogResult:
    response: np.ndarray
    contours: list[Contour]


def laplacian_of_gaussian(img, sigma: float = 2.0, floor: float = 1.0, within=None) -> LogResult:
    """LoG response plus the zero-crossing contours of its bright lobes."""
    resp = log_response(img, sigma)
    return LogResult(resp, zero_crossing_contours(resp, floor=floor, within=within))


# ---------------------------------------------------------------------------
# Circle fitting
# ---------------------------------------------------------------------------


@dataclass
class CircleFit:
    cx: float
    cy: float
    r: float
    residual: float  # RMS radial error, pixels

    @property
    def relative_residual(self) -> float:
        return self.residual / self.r if self.r > 0 else math.inf


def boundary_points(region) -> np.ndarray:
    """Crack-edge midpoints of a region as (x, y).

    One point per side shared between a region pixel and a non-region pixel
    (image exterior counts as non-region).  These lie on the pixel-square
    outline, so a rasterised disc yields close to its true radius.
    """
    reg = np.pad(np.asarray(region, dtype=bool), 1)
    pts = []
    for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        nb = np.roll(reg, (-dr, -dc), axis=(0, 1))
        rr, cc = np.nonzero(reg & ~nb)
        pts.append(np.column_stack([cc - 1 + 0.5 * dc, rr - 1 + 0.5 * dr]))
    return np.concatenate(pts).astype(float)


def kasa_fit(x, y) -> CircleFit:
    """Algebraic least-squares circle through points (Kasa normal equations)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise CircleFitError("need at least 3 points")
    xm, ym = x.mean(), y.mean()
    u, v = x - xm, y - ym
    suu, svv, suv = (u * u).sum(), (v * v).sum(), (u * v).sum()
    b = 0.5 * np.array([(u**3 + u * v * v).sum(), (v**3 + v * u * u).sum()])
    a = np.array([[suu, suv], [suv, svv]])
    det = suu * svv - suv * suv
    if det <= 1e-9 * max(suu * svv, 1e-12):
        raise CircleFitError("boundary points are collinear")
    uc, vc = np.linalg.solve(a, b)
    cx, cy = uc + xm, vc + ym
    r = math.sqrt(uc * uc + vc * vc + (suu + svv) / len(x))
    dist = np.hypot(x - cx, y - cy)
    residual = float(np.sqrt(np.mean((dist - r) ** 2)))
    return CircleFit(float(cx), float(cy), float(r), residual)


def fit_circle(region, trim: int = 5) -> CircleFit:
    """Least-squares circle fit to a region's boundary.

    ``trim`` rounds of refitting drop boundary points whose radial error
    exceeds ``max(1.5, 2.5 * rms)``; this lets partially occluded discs fit
    their remaining arc instead of the occluder's edge.  The reported
    residual is the RMS over the kept points.
    """
    region = np.asarray(region, dtype=bool)
    if region.sum() < 5:
        raise CircleFitError("region area below 5 pixels")
    pts = boundary_points(region)
    fit = kasa_fit(pts[:, 0], pts[:, 1])
    for _ in range(trim):
        err = np.abs(np.hypot(pts[:, 0] - fit.cx, pts[:, 1] - fit.cy) - fit.r)
        keep = err <= max(1.5, 2.5 * fit.residual)
        if keep.all() or keep.sum() < max(8, len(pts) // 2):
            break
        pts = pts[keep]
        fit = kasa_fit(pts[:, 0], pts[:, 1])
    return fit
