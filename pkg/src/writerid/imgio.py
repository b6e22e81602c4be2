"""Grayscale image file I/O (PNG and PGM)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError


def load_gray(path: str | Path) -> np.ndarray:
    """Load an image as an 8-bit luminance grid.

    Color input is reduced with ITU-R 601 weights (0.299 R + 0.587 G +
    0.114 B), which is what PIL's "L" conversion applies.
    """
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def save_gray(path: str | Path, pixels: np.ndarray) -> None:
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise ValidationError("expected a 2-D uint8 pixel grid")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels, mode="L").save(path)
