"""Resampling primitives shared by piece extraction and augmentation.

Coordinate convention: pixel (row r, column c) has its center at the
continuous position (c + 0.5, r + 0.5).  Positions outside the grid clamp
to the border (edge replication), and sampling exactly on a pixel center
returns that pixel's value with no interpolation loss.
"""

from __future__ import annotations

import numpy as np


def bilinear_sample(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinearly sample `pixels` at continuous positions (xs, ys) -> float64."""
    h, w = pixels.shape
    fx = np.asarray(xs, dtype=np.float64) - 0.5
    fy = np.asarray(ys, dtype=np.float64) - 0.5
    x0f = np.floor(fx)
    y0f = np.floor(fy)
    tx = fx - x0f
    ty = fy - y0f
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    p = pixels.astype(np.float64, copy=False)
    top = p[y0, x0] * (1.0 - tx) + p[y0, x1] * tx
    bottom = p[y1, x0] * (1.0 - tx) + p[y1, x1] * tx
    return top * (1.0 - ty) + bottom * ty


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Rescale to (out_h, out_w) by bilinear sampling; identity when sizes match."""
    h, w = pixels.shape
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w)
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h)
    return bilinear_sample(pixels, xs[None, :], ys[:, None])


def quantize_u8(values: np.ndarray) -> np.ndarray:
    """Round to the nearest 8-bit level and clamp to [0, 255]."""
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)
