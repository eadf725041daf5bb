"""Global and local view extraction.

The global view is the bounding box of the largest connected region of an
activation map thresholded at its mean; local views are square sub-crops of
the global view (four corners and the centre, optionally topped up with
random crops).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FIXED_CROPS = 5
# fixed-prefix plans continue with the four edge midpoints (a 3x3 grid)
GRID_CROPS = 9


class ViewError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    """Half-open box: rows ``top:bottom``, cols ``left:right``."""

    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left


@dataclass(frozen=True)
class View:
    pixels: np.ndarray
    kind: str                       # "global" | "local"
    origin: tuple[int, int]         # (row, col) in source image coordinates

    @property
    def side(self) -> int:
        return min(self.pixels.shape)


@dataclass(frozen=True)
class CropPlan:
    k: int
    patch_frac: float = 1 / 3
    fixed_five: bool = True
    rng_seed: int = 0
    # take only the first k fixed crops when k < 5 instead of rejecting
    fixed_prefix: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ViewError("crop plan needs k >= 1")
        if not 0 < self.patch_frac <= 0.5:
            raise ViewError(f"patch_frac must lie in (0, 0.5], got {self.patch_frac}")
        if self.fixed_five and self.k < FIXED_CROPS and not self.fixed_prefix:
            raise ViewError(f"fixed_five needs k >= {FIXED_CROPS}, got k={self.k}")

    @property
    def n_fixed(self) -> int:
        if not self.fixed_five:
            return 0
        return min(self.k, GRID_CROPS if self.fixed_prefix else FIXED_CROPS)

    @property
    def n_random(self) -> int:
        return self.k - self.n_fixed

    def with_seed(self, seed: int) -> "CropPlan":
        return CropPlan(self.k, self.patch_frac, self.fixed_five, seed, self.fixed_prefix)


def locate_global(activation_map: np.ndarray, image_shape: tuple[int, int] | None = None) -> BBox:
    """Bounding box of the largest 4-connected above-mean region.

    Ties between equally large regions go to the one whose first cell comes
    first in row-major order.  With ``image_shape`` the box is scaled from
    map cells to image pixels.
    """
    amap = np.asarray(activation_map, dtype=np.float64)
    if amap.ndim != 2 or not np.all(np.isfinite(amap)):
        raise ViewError("activation map must be a finite 2-D grid")
    if np.ptp(amap) == 0:
        raise ViewError("no salient region: activation map is constant")
    mask = amap > amap.mean()
    labels, n = ndimage.label(mask)     # default structure is 4-connectivity
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    # ndimage numbers components in row-major order of their first cell
    best = int(np.argmax(sizes)) + 1
    rows, cols = np.nonzero(labels == best)
    box = BBox(int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
    if image_shape is None:
        return box
    mh, mw = amap.shape
    h, w = image_shape
    return BBox(box.top * h // mh, box.left * w // mw,
                -(-box.bottom * h // mh), -(-box.right * w // mw))


def expand_bbox(bbox: BBox, min_side: int, image_shape: tuple[int, int]) -> BBox:
    """Grow ``bbox`` about its centre so each side is at least ``min_side``, staying in bounds."""
    h, w = image_shape

    def grow(lo, hi, n):
        need = min(min_side, n) - (hi - lo)
        if need <= 0:
            return lo, hi
        lo = max(0, lo - need // 2)
        hi = lo + min(min_side, n)
        if hi > n:
            lo, hi = n - min(min_side, n), n
        return lo, hi

    top, bottom = grow(bbox.top, bbox.bottom, h)
    left, right = grow(bbox.left, bbox.right, w)
    return BBox(top, left, bottom, right)


def crop_global(image: np.ndarray, bbox: BBox) -> View:
    h, w = image.shape
    if not (0 <= bbox.top < bbox.bottom <= h and 0 <= bbox.left < bbox.right <= w):
        raise ViewError(f"bbox {bbox} lies outside image of shape {image.shape}")
    return View(image[bbox.top:bbox.bottom, bbox.left:bbox.right], "global", (bbox.top, bbox.left))


def local_origins(height: int, width: int, plan: CropPlan) -> tuple[int, list[tuple[int, int]]]:
    """Patch side and crop origins (relative to the global view) for ``plan``."""
    side = int(round(plan.patch_frac * min(height, width)))
    if side < 2:
        raise ViewError(f"patch side {side} < 2 for a {height}x{width} global view")
    mid_r, mid_c = (height - side) // 2, (width - side) // 2
    fixed = [(0, 0), (0, width - side), (height - side, 0), (height - side, width - side),
             (mid_r, mid_c), (0, mid_c), (mid_r, 0), (mid_r, width - side), (height - side, mid_c)]
    origins = fixed[:plan.n_fixed]
    if plan.n_random:
        rng = np.random.default_rng(plan.rng_seed)
        rows = rng.integers(0, height - side + 1, size=plan.n_random)
        cols = rng.integers(0, width - side + 1, size=plan.n_random)
        origins += [(int(r), int(c)) for r, c in zip(rows, cols)]
    return side, origins


def crop_locals(g: View, plan: CropPlan) -> list[View]:
    h, w = g.pixels.shape
    side, origins = local_origins(h, w, plan)
    oy, ox = g.origin
    return [View(g.pixels[r:r + side, c:c + side], "local", (oy + r, ox + c)) for r, c in origins]


def schedule(epoch: int, warmup_epochs: int, k_max: int, patch_frac: float = 1 / 3,
             rng_seed: int = 0) -> CropPlan:
    """Five fixed crops during warm-up, then ``k_max`` views (five fixed + random)."""
    if warmup_epochs < 0:
        raise ViewError("warmup_epochs must be >= 0")
    if k_max < FIXED_CROPS:
        raise ViewError(f"k_max must be >= {FIXED_CROPS}, got {k_max}")
    k = FIXED_CROPS if epoch < warmup_epochs else k_max
    return CropPlan(k, patch_frac, True, rng_seed)


@functools.lru_cache(maxsize=256)
def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Triangle-filter weights; the filter widens with the shrink factor."""
    ratio = n_in / n_out
    support = max(ratio, 1.0)
    w = np.zeros((n_out, n_in))
    src = np.arange(n_in) + 0.5
    for i in range(n_out):
        center = (i + 0.5) * ratio
        taps = np.clip(1.0 - np.abs(src - center) / support, 0.0, None)
        if taps.sum() == 0:
            taps[min(int(center), n_in - 1)] = 1.0
        w[i] = taps / taps.sum()
    w.setflags(write=False)
    return w


def resize(pixels: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resampling to ``side`` x ``side`` (antialiased when shrinking)."""
    h, w = pixels.shape
    if h < 2 or w < 2:
        raise ViewError(f"view of shape {pixels.shape} is too small to encode")
    return _resample_matrix(h, side) @ pixels @ _resample_matrix(w, side).T
