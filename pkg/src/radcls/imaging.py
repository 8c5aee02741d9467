"""Grayscale image processing: CLAHE, resizing, letterboxing, augmentations.

Images are 2-D ``numpy.uint8`` arrays indexed ``[row, col]`` with
intensities in [0, 255].  All operations are pure functions; augmentation
randomness comes from a generator seeded per call, never shared state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

LEVELS = 256


@dataclass(frozen=True)
class LetterboxTransform:
    """Geometry of an aspect-preserving resize onto a padded canvas."""

    scale: float
    pad_left: int
    pad_top: int
    out_w: int
    out_h: int


@dataclass(frozen=True)
class AugmentSpec:
    """Training-time augmentation parameters.

    Transforms are applied in the fixed order hflip, rotate, scale,
    translate, crop-then-resize-back, brightness, invert.  Magnitudes
    default to conservative values and every transform can be switched
    off individually.
    """

    rotation_deg: float = 10.0
    hflip_prob: float = 0.5
    crop_fraction: float = 0.9
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    translate_fraction: float = 0.0625
    brightness_delta: float = 25.0
    invert_prob: float = 0.1
    enable_hflip: bool = True
    enable_rotation: bool = True
    enable_scale: bool = True
    enable_translate: bool = True
    enable_crop: bool = True
    enable_brightness: bool = True
    enable_invert: bool = True

    def __post_init__(self):
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        if not 0.0 <= self.invert_prob <= 1.0:
            raise ValueError("invert_prob must be in [0, 1]")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError("crop_fraction must be in (0, 1]")
        if self.scale_lo > self.scale_hi or self.scale_lo <= 0:
            raise ValueError("scale range must satisfy 0 < scale_lo <= scale_hi")
        if not 0.0 <= self.translate_fraction < 1.0:
            raise ValueError("translate_fraction must be in [0, 1)")
        if self.brightness_delta < 0:
            raise ValueError("brightness_delta must be >= 0")

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(
            enable_hflip=False,
            enable_rotation=False,
            enable_scale=False,
            enable_translate=False,
            enable_crop=False,
            enable_brightness=False,
            enable_invert=False,
        )


@dataclass(frozen=True)
class PreprocessOptions:
    """Per-image pipeline settings shared by training, inference, and the CLI."""

    clahe_enabled: bool = True
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    crop_margin: float = 0.0


def load_gray(path) -> np.ndarray:
    """Load an image file as 8-bit grayscale."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_gray(img: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)


def _check_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a 2-D grayscale array, got shape {img.shape}")
    return img


def _tile_edges(n_pixels: int, n_tiles: int) -> np.ndarray:
    return np.round(np.arange(n_tiles + 1) * n_pixels / n_tiles).astype(int)


def clahe(img: np.ndarray, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    The image is split into ``tiles = (tx, ty)`` rectangles (tx across the
    width, ty down the height).  Each tile's 256-bin histogram is clipped at
    ``clip_limit * tile_pixels / 256`` and the clipped excess is
    redistributed uniformly over all bins in one pass, so histogram mass is
    conserved per tile.  Each tile's mapping is its CDF rescaled to
    [0, 255].  An output pixel applies the mappings of its (up to four)
    neighboring tiles and blends them bilinearly by the pixel's distance to
    the tile centers; beyond the outermost centers the nearest tile's
    mapping is used alone.  ``clip_limit = math.inf`` disables clipping,
    which with a single tile reduces to plain global equalization.
    """
    img = _check_gray(img)
    tx, ty = tiles
    if tx < 1 or ty < 1:
        raise ValueError(f"tile counts must be >= 1, got {tiles}")
    if clip_limit <= 0:
        raise ValueError(f"clip_limit must be positive, got {clip_limit}")
    h, w = img.shape
    if w < tx or h < ty:
        raise ValueError(f"image {w}x{h} too small for {tx}x{ty} tiles")

    xs = _tile_edges(w, tx)
    ys = _tile_edges(h, ty)
    mappings = np.empty((ty, tx, LEVELS), dtype=np.float64)
    for i in range(ty):
        for j in range(tx):
            tile = img[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            n = tile.size
            hist = np.bincount(tile.ravel(), minlength=LEVELS).astype(np.float64)
            if math.isfinite(clip_limit):
                limit = clip_limit * n / LEVELS
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / LEVELS
            mappings[i, j] = np.cumsum(hist) / n * (LEVELS - 1)

    cx = (xs[:-1] + xs[1:] - 1) / 2.0
    cy = (ys[:-1] + ys[1:] - 1) / 2.0
    j0, fx = _center_weights(np.arange(w), cx)
    i0, fy = _center_weights(np.arange(h), cy)
    j1 = np.minimum(j0 + 1, tx - 1)
    i1 = np.minimum(i0 + 1, ty - 1)

    v00 = mappings[i0[:, None], j0[None, :], img]
    v01 = mappings[i0[:, None], j1[None, :], img]
    v10 = mappings[i1[:, None], j0[None, :], img]
    v11 = mappings[i1[:, None], j1[None, :], img]
    wy = fy[:, None]
    wx = fx[None, :]
    out = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)
    return np.clip(np.rint(out), 0, LEVELS - 1).astype(np.uint8)


def _center_weights(coords: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lower tile index and fractional weight of each pixel coordinate."""
    idx = np.searchsorted(centers, coords, side="right") - 1
    idx = np.clip(idx, 0, len(centers) - 1)
    upper = np.minimum(idx + 1, len(centers) - 1)
    span = centers[upper] - centers[idx]
    frac = np.where(span > 0, (coords - centers[idx]) / np.where(span > 0, span, 1.0), 0.0)
    return idx, np.clip(frac, 0.0, 1.0)


def _resample_bilinear(src: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample of a 2-D float array using half-pixel centers."""
    in_h, in_w = src.shape
    sx = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    sy = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    sx = np.clip(sx, 0.0, in_w - 1.0)
    sy = np.clip(sy, 0.0, in_h - 1.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    fx = sx - x0
    fy = sy - y0
    top = src[y0[:, None], x0[None, :]] * (1 - fx) + src[y0[:, None], x1[None, :]] * fx
    bot = src[y1[:, None], x0[None, :]] * (1 - fx) + src[y1[:, None], x1[None, :]] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def resize(img: np.ndarray, out: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``out = (width, height)``."""
    img = _check_gray(img)
    out_w, out_h = out
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output dims must be positive, got {out}")
    res = _resample_bilinear(img.astype(np.float64), out_w, out_h)
    return np.clip(np.rint(res), 0, LEVELS - 1).astype(np.uint8)


def letterbox(
    img: np.ndarray, out: tuple[int, int], pad_value: int = 0
) -> tuple[np.ndarray, LetterboxTransform]:
    """Aspect-preserving resize onto an ``out = (width, height)`` canvas.

    The content is scaled by ``min(out_w/in_w, out_h/in_h)``, centered, and
    the remaining canvas filled with ``pad_value``; any off-by-one from
    rounding goes to the right/bottom pad.  Returns the padded image and
    the transform for remapping box annotations.
    """
    img = _check_gray(img)
    out_w, out_h = out
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output dims must be positive, got {out}")
    in_h, in_w = img.shape
    scale = min(out_w / in_w, out_h / in_h)
    cw = min(out_w, int(round(in_w * scale)))
    ch = min(out_h, int(round(in_h * scale)))
    content = resize(img, (cw, ch))
    pad_left = (out_w - cw) // 2
    pad_top = (out_h - ch) // 2
    canvas = np.full((out_h, out_w), pad_value, dtype=np.uint8)
    canvas[pad_top:pad_top + ch, pad_left:pad_left + cw] = content
    return canvas, LetterboxTransform(scale, pad_left, pad_top, out_w, out_h)


def _warp_affine(img: np.ndarray, fwd: np.ndarray) -> np.ndarray:
    """Apply a forward 2x3 affine map with bilinear sampling, zero fill."""
    h, w = img.shape
    a = np.vstack([fwd, [0.0, 0.0, 1.0]])
    inv = np.linalg.inv(a)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    inside = (src_x >= 0) & (src_x <= w - 1) & (src_y >= 0) & (src_y <= h - 1)
    cx = np.clip(src_x, 0, w - 1)
    cy = np.clip(src_y, 0, h - 1)
    x0 = np.floor(cx).astype(int)
    y0 = np.floor(cy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    src = img.astype(np.float64)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out[~inside] = 0.0
    return np.clip(np.rint(out), 0, LEVELS - 1).astype(np.uint8)


def _centered(h: int, w: int, lin: np.ndarray) -> np.ndarray:
    """Affine matrix applying the 2x2 ``lin`` about the image center."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    offset = np.array([cx, cy]) - lin @ np.array([cx, cy])
    return np.hstack([lin, offset[:, None]])


def augment(img: np.ndarray, spec: AugmentSpec, seed: int) -> np.ndarray:
    """Apply the enabled augmentations in their fixed order, seeded by ``seed``.

    Output dimensions equal the input's; the result is fully determined by
    ``(img, spec, seed)``.
    """
    img = _check_gray(img).copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w = img.shape

    if spec.enable_hflip and rng.random() < spec.hflip_prob:
        img = img[:, ::-1].copy()

    if spec.enable_rotation:
        theta = math.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
        lin = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        img = _warp_affine(img, _centered(h, w, lin))

    if spec.enable_scale:
        s = rng.uniform(spec.scale_lo, spec.scale_hi)
        img = _warp_affine(img, _centered(h, w, np.array([[s, 0.0], [0.0, s]])))

    if spec.enable_translate:
        dx = rng.uniform(-spec.translate_fraction, spec.translate_fraction) * w
        dy = rng.uniform(-spec.translate_fraction, spec.translate_fraction) * h
        fwd = np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]])
        img = _warp_affine(img, fwd)

    if spec.enable_crop:
        cw = max(1, int(round(w * spec.crop_fraction)))
        ch = max(1, int(round(h * spec.crop_fraction)))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = int(rng.integers(0, h - ch + 1))
        img = resize(img[y0:y0 + ch, x0:x0 + cw], (w, h))

    if spec.enable_brightness:
        delta = rng.uniform(-spec.brightness_delta, spec.brightness_delta)
        img = np.clip(np.rint(img.astype(np.float64) + delta), 0, LEVELS - 1).astype(np.uint8)

    if spec.enable_invert and rng.random() < spec.invert_prob:
        img = (LEVELS - 1 - img.astype(np.int16)).astype(np.uint8)

    return img


def preprocess(
    img: np.ndarray,
    roi_box=None,
    input_size: int = 512,
    opts: PreprocessOptions | None = None,
) -> np.ndarray:
    """ROI crop, CLAHE, and resize: the per-image pipeline before the network."""
    from .boxes import crop_roi

    opts = opts or PreprocessOptions()
    if roi_box is not None:
        img = crop_roi(img, roi_box, opts.crop_margin)
    if opts.clahe_enabled:
        img = clahe(img, opts.clahe_clip, opts.clahe_tiles)
    return resize(img, (input_size, input_size))


def normalize(img: np.ndarray) -> np.ndarray:
    """Map uint8 intensities to floats in [-1, 1]: (p/255 - 0.5) / 0.5."""
    return (np.asarray(img, dtype=np.float32) / (LEVELS - 1) - 0.5) / 0.5


def with_augment_defaults(spec: AugmentSpec, enabled: bool) -> AugmentSpec:
    """Return ``spec`` with every transform toggled to ``enabled``."""
    return replace(
        spec,
        enable_hflip=enabled,
        enable_rotation=enabled,
        enable_scale=enabled,
        enable_translate=enabled,
        enable_crop=enabled,
        enable_brightness=enabled,
        enable_invert=enabled,
    )
