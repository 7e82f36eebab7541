"""Fundus preprocessing: content crop, retina geometry, local-mean contrast
enhancement, circular masking, and resize onto a square grey canvas.

The stages compose in that order; the output is a canvas_size x canvas_size x 3
float32 array whose pixels outside the (shrunken) retina circle are exactly the
background level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ScreeningError


class EmptyContentError(ScreeningError):
    pass


class NoRetinaError(ScreeningError):
    pass


@dataclass(frozen=True)
class PrepConfig:
    canvas_size: int = 512
    row_threshold_frac: float = 0.02
    sigma_over_radius: float = 1.0 / 30.0
    subtract_gain: float = 4.0
    mask_area_reduction: float = 0.10
    background_level: float = 0.5

    def __post_init__(self):
        if self.canvas_size < 16:
            raise ValueError("canvas_size must be >= 16")
        if not 0.0 < self.row_threshold_frac < 1.0:
            raise ValueError("row_threshold_frac must be in (0, 1)")
        if not 0.0 <= self.mask_area_reduction < 1.0:
            raise ValueError("mask_area_reduction must be in [0, 1)")
        if self.sigma_over_radius <= 0.0:
            raise ValueError("sigma_over_radius must be positive")
        if self.subtract_gain < 0.0:
            raise ValueError("subtract_gain must be non-negative")


@dataclass(frozen=True)
class CropRect:
    """Half-open row/column bounds: rows [top, bottom), cols [left, right)."""

    top: int
    bottom: int
    left: int
    right: int

    @property
    def height(self) -> int:
        return self.bottom - self.top

    @property
    def width(self) -> int:
        return self.right - self.left

    def apply(self, img: np.ndarray) -> np.ndarray:
        return img[self.top : self.bottom, self.left : self.right]


@dataclass(frozen=True)
class RetinaGeometry:
    center_row: float
    center_col: float
    radius: float


def crop_to_content(img: np.ndarray, cfg: PrepConfig) -> CropRect:
    """Find the content box by scanning row/column intensity sums outward from
    the center; a side's boundary sits at the first sum below the threshold
    (a fraction of the maximum sum along that axis)."""
    h, w = img.shape[:2]
    mean = img.mean(axis=2)
    rows = mean.sum(axis=1, dtype=np.float64)
    cols = mean.sum(axis=0, dtype=np.float64)
    if rows.max() <= 0.0 or cols.max() <= 0.0:
        raise EmptyContentError("image has no content (all-zero intensities)")
    t_row = cfg.row_threshold_frac * rows.max()
    t_col = cfg.row_threshold_frac * cols.max()
    r0, c0 = h // 2, w // 2
    if rows[r0] < t_row or cols[c0] < t_col:
        raise EmptyContentError("central row or column below content threshold")

    def bounds(sums, center, t):
        below = sums < t
        lo_hits = np.nonzero(below[:center])[0]
        lo = int(lo_hits[-1]) + 1 if lo_hits.size else 0
        hi_hits = np.nonzero(below[center + 1 :])[0]
        hi = center + 1 + int(hi_hits[0]) if hi_hits.size else len(sums)
        return lo, hi

    top, bottom = bounds(rows, r0, t_row)
    left, right = bounds(cols, c0, t_col)
    return CropRect(top, bottom, left, right)


def estimate_geometry(img: np.ndarray) -> RetinaGeometry:
    """Measure the retina disc from the central row: pixels brighter than a
    tenth of the row mean count as lit; the lit extent gives the diameter."""
    h, w = img.shape[:2]
    row = img[h // 2].mean(axis=1).astype(np.float64)
    lit = row > row.mean() / 10.0
    if int(lit.sum()) < 8:
        raise NoRetinaError("fewer than 8 lit pixels on the central row")
    idx = np.nonzero(lit)[0]
    left, right = int(idx[0]), int(idx[-1])
    radius = (right - left) / 2.0
    if radius <= 0.0:
        raise NoRetinaError("degenerate lit extent on the central row")
    return RetinaGeometry(center_row=h / 2.0, center_col=(left + right) / 2.0, radius=radius)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian sampled at integer offsets, truncated at 4 sigma."""
    radius = max(1, int(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(kernel) - 1) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    out = np.zeros(arr.shape, dtype=np.float64)
    index = [slice(None)] * arr.ndim
    n = arr.shape[axis]
    for tap, weight in enumerate(kernel):
        index[axis] = slice(tap, tap + n)
        out += weight * padded[tuple(index)]
    return out


def separable_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Isotropic Gaussian blur as two 1-D passes with edge replication.

    Matches a dense 2-D convolution with the replicated border to float
    accuracy; computed in float64.
    """
    kernel = gaussian_kernel(sigma)
    out = _blur_axis(img.astype(np.float64), kernel, axis=0)
    return _blur_axis(out, kernel, axis=1)


def local_mean_subtract(img: np.ndarray, geo: RetinaGeometry, cfg: PrepConfig) -> np.ndarray:
    """Replace each pixel by gain * (pixel - local Gaussian mean) + 0.5,
    clamped to [0, 1]; sigma scales with the measured retina radius."""
    sigma = cfg.sigma_over_radius * geo.radius
    blurred = separable_blur(img, sigma)
    out = cfg.subtract_gain * (img.astype(np.float64) - blurred) + 0.5
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def mask_radius(geo: RetinaGeometry, cfg: PrepConfig) -> float:
    """Radius of the kept circle after shrinking the mask area by the
    configured fraction (area factor, so radius scales by its square root)."""
    return geo.radius * float(np.sqrt(1.0 - cfg.mask_area_reduction))


def apply_circular_mask(img: np.ndarray, geo: RetinaGeometry, cfg: PrepConfig) -> np.ndarray:
    """Set pixels strictly outside the shrunken retina circle to the
    background level; interior pixels pass through unchanged."""
    h, w = img.shape[:2]
    rr = np.arange(h, dtype=np.float64)[:, None] - geo.center_row
    cc = np.arange(w, dtype=np.float64)[None, :] - geo.center_col
    outside = rr * rr + cc * cc > mask_radius(geo, cfg) ** 2
    out = img.copy()
    out[outside] = np.float32(cfg.background_level)
    return out


def _resample_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    a = np.take(arr, i0c, axis=axis)
    b = np.take(arr, i1c, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    out = _resample_axis(img.astype(np.float64), out_h, axis=0)
    out = _resample_axis(out, out_w, axis=1)
    return out.astype(np.float32)


def _canvas_placement(h: int, w: int, canvas: int):
    scale = canvas / max(h, w)
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    top = (canvas - new_h) // 2
    left = (canvas - new_w) // 2
    return new_h, new_w, top, left, scale


def resize_to_canvas(img: np.ndarray, cfg: PrepConfig) -> np.ndarray:
    """Bilinear-scale so the longer side equals canvas_size, keeping aspect
    ratio, and center on a square canvas filled with the background level.
    The extra padding pixel (odd bands) goes to the bottom/right."""
    h, w = img.shape[:2]
    new_h, new_w, top, left, _ = _canvas_placement(h, w, cfg.canvas_size)
    if (new_h, new_w) == (h, w):
        content = img.astype(np.float32)
    else:
        content = resize_bilinear(img, new_h, new_w)
    canvas = np.full(
        (cfg.canvas_size, cfg.canvas_size, 3), np.float32(cfg.background_level), dtype=np.float32
    )
    canvas[top : top + new_h, left : left + new_w] = content
    return canvas


def preprocess(img: np.ndarray, cfg: PrepConfig | None = None, image_id=None) -> np.ndarray:
    """Run the full pipeline: crop, measure geometry, local-mean subtract,
    circular mask, canvas resize. Pixels outside the mapped mask circle are
    forced to the background level exactly (bilinear edge blends would
    otherwise leave them off by float noise)."""
    cfg = cfg or PrepConfig()
    try:
        rect = crop_to_content(img, cfg)
        cropped = rect.apply(img)
        geo = estimate_geometry(cropped)
    except ScreeningError as exc:
        if image_id is not None:
            raise type(exc)(f"{image_id}: {exc}") from exc
        raise
    enhanced = local_mean_subtract(cropped, geo, cfg)
    masked = apply_circular_mask(enhanced, geo, cfg)
    canvas = resize_to_canvas(masked, cfg)

    new_h, new_w, top, left, scale = _canvas_placement(*masked.shape[:2], cfg.canvas_size)
    center_r = (geo.center_row + 0.5) * scale - 0.5 + top
    center_c = (geo.center_col + 0.5) * scale - 0.5 + left
    r_mapped = mask_radius(geo, cfg) * scale
    rr = np.arange(cfg.canvas_size, dtype=np.float64)[:, None] - center_r
    cc = np.arange(cfg.canvas_size, dtype=np.float64)[None, :] - center_c
    canvas[rr * rr + cc * cc > r_mapped * r_mapped] = np.float32(cfg.background_level)
    return canvas
