"""Fixed-size, mass-centered character images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .model import PipelineConfig


@dataclass
class StandardizedChar:
    pixels: np.ndarray
    index: int
    scale_exponent: int
    mass_centered: bool = True


def scale_exponent(h: int, w: int, H: int, W: int, s: float) -> int:
    """Least n >= 0 such that an ``h x w`` crop shrunk by ``s**n`` fits in ``H x W``."""
    n = 0
    while h / s**n > H + 1e-9 or w / s**n > W + 1e-9:
        n += 1
    return n


def _downscale(crop: np.ndarray, factor: float, H: int, W: int) -> np.ndarray:
    h, w = crop.shape
    nh = min(max(int(math.floor(h / factor + 0.5)), 1), H)
    nw = min(max(int(math.floor(w / factor + 0.5)), 1), W)
    img = Image.fromarray(crop.astype(np.float32), mode="F")
    return np.asarray(img.resize((nw, nh), Image.BILINEAR), dtype=np.float64)


def barycenter(image: np.ndarray) -> tuple[float, float] | None:
    """Row/column barycenter of the mass ``1 - intensity``; None without mass."""
    mass = np.clip(1.0 - image, 0.0, None)
    total = mass.sum()
    if total <= 1e-12:
        return None
    r = np.arange(image.shape[0]) @ mass.sum(axis=1) / total
    c = np.arange(image.shape[1]) @ mass.sum(axis=0) / total
    return float(r), float(c)


def standardize_char(
    line_image: np.ndarray, mask: np.ndarray, config: PipelineConfig | None = None, index: int = -1
) -> StandardizedChar:
    """Crop the masked character and pad it to ``H x W`` around its barycenter.

    Pixels outside the mask turn white. Crops larger than the canvas are
    shrunk by the smallest power of ``s`` that makes them fit. Padding is
    integral, so the barycenter lands within half a pixel of ``(H/2, W/2)``
    unless the crop has to be clamped against a canvas edge.
    """
    config = config or PipelineConfig()
    H, W = config.H, config.W
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty character mask")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    window = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    crop = np.where(mask[window], np.asarray(line_image, dtype=np.float64)[window], 1.0)

    n = scale_exponent(*crop.shape, H, W, config.s)
    if n:
        crop = np.clip(_downscale(crop, config.s**n, H, W), 0.0, 1.0)
    h, w = crop.shape

    center = barycenter(crop)
    centered = center is not None
    if center is None:
        center = ((h - 1) / 2.0, (w - 1) / 2.0)
    oy = min(max(int(math.floor(H / 2 - center[0] + 0.5)), 0), H - h)
    ox = min(max(int(math.floor(W / 2 - center[1] + 0.5)), 0), W - w)
    canvas = np.ones((H, W))
    canvas[oy : oy + h, ox : ox + w] = crop
    return StandardizedChar(canvas, index, n, centered)


def standardize_line_chars(line_image, masks, config: PipelineConfig | None = None) -> list[StandardizedChar]:
    return [standardize_char(line_image, m.mask, config, m.index) for m in masks]
