"""Per-piece augmentation operations and their product enumeration.

A chain is one point in the Cartesian product {shine factors} x
{horizontal shifts} x {vertical shifts} x {flip-h yes/no} x
{flip-v yes/no} x ({zoom factors} when the dataset family enables zoom).
Every factor list must contain its identity member, so the untouched piece
is always part of the augmented family.

Pixel semantics (applied in this order):
  zoom   - bilinear rescale, then center-crop or edge-pad back to the
           original dimensions, so tiling geometry is unchanged;
  shine  - multiplicative brightness, rounded and clamped to [0, 255];
  shift  - translation with edge replication, dimensions preserved;
  flips  - axis reversals.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotations import PieceImage
from .errors import ValidationError
from .imgops import quantize_u8, resize_bilinear


def _fmt(x: float) -> str:
    return format(float(x), "g")


@dataclass(frozen=True)
class AugmentationParams:
    shine_factors: tuple[float, ...] = (0.8, 1.0, 1.2)
    shift_offsets_h: tuple[int, ...] = (-10, 0, 10)
    shift_offsets_v: tuple[int, ...] = (-10, 0, 10)
    zoom_factors: tuple[float, ...] = (0.9, 1.0, 1.1)

    def __post_init__(self) -> None:
        object.__setattr__(self, "shine_factors", tuple(float(f) for f in self.shine_factors))
        object.__setattr__(self, "shift_offsets_h", tuple(int(d) for d in self.shift_offsets_h))
        object.__setattr__(self, "shift_offsets_v", tuple(int(d) for d in self.shift_offsets_v))
        object.__setattr__(self, "zoom_factors", tuple(float(f) for f in self.zoom_factors))
        for name, values, identity in (
            ("shine_factors", self.shine_factors, 1.0),
            ("shift_offsets_h", self.shift_offsets_h, 0),
            ("shift_offsets_v", self.shift_offsets_v, 0),
            ("zoom_factors", self.zoom_factors, 1.0),
        ):
            if not values:
                raise ValidationError(f"{name} must be non-empty")
            if identity not in values:
                raise ValidationError(f"{name} must include the identity value {identity}")
        if any(f <= 0 for f in self.shine_factors + self.zoom_factors):
            raise ValidationError("shine and zoom factors must be positive")

    def to_json(self) -> dict:
        return {
            "shine_factors": list(self.shine_factors),
            "shift_offsets_h": list(self.shift_offsets_h),
            "shift_offsets_v": list(self.shift_offsets_v),
            "zoom_factors": list(self.zoom_factors),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AugmentationParams":
        return cls(
            shine_factors=tuple(doc["shine_factors"]),
            shift_offsets_h=tuple(doc["shift_offsets_h"]),
            shift_offsets_v=tuple(doc["shift_offsets_v"]),
            zoom_factors=tuple(doc["zoom_factors"]),
        )


@dataclass(frozen=True)
class AugmentationChain:
    shine: float = 1.0
    dx: int = 0
    dy: int = 0
    flip_h: bool = False
    flip_v: bool = False
    zoom: float = 1.0

    def describe(self) -> str:
        return (
            f"shine={_fmt(self.shine)},dx={self.dx},dy={self.dy},"
            f"fh={int(self.flip_h)},fv={int(self.flip_v)},zoom={_fmt(self.zoom)}"
        )

    @property
    def is_identity(self) -> bool:
        return (
            self.shine == 1.0
            and self.dx == 0
            and self.dy == 0
            and not self.flip_h
            and not self.flip_v
            and self.zoom == 1.0
        )


def enumerate_chains(params: AugmentationParams, zoom_enabled: bool) -> list[AugmentationChain]:
    """All chains in documented product order: shine, dx, dy, flip-h, flip-v, zoom."""
    zooms = params.zoom_factors if zoom_enabled else (1.0,)
    chains = []
    for shine in params.shine_factors:
        for dx in params.shift_offsets_h:
            for dy in params.shift_offsets_v:
                for flip_h in (False, True):
                    for flip_v in (False, True):
                        for zoom in zooms:
                            chains.append(
                                AugmentationChain(shine, dx, dy, flip_h, flip_v, zoom)
                            )
    return chains


def apply_shine(pixels: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return pixels.copy()
    return quantize_u8(pixels.astype(np.float64) * factor)


def apply_shift(pixels: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate content by (dx, dy); vacated pixels replicate the nearest edge."""
    h, w = pixels.shape
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    return pixels[np.ix_(rows, cols)]


def _fit_center(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-crop or edge-pad each axis independently to (out_h, out_w)."""
    h, w = values.shape
    if h > out_h:
        top = (h - out_h) // 2
        values = values[top : top + out_h, :]
    elif h < out_h:
        before = (out_h - h) // 2
        values = np.pad(values, ((before, out_h - h - before), (0, 0)), mode="edge")
    if w > out_w:
        left = (w - out_w) // 2
        values = values[:, left : left + out_w]
    elif w < out_w:
        before = (out_w - w) // 2
        values = np.pad(values, ((0, 0), (before, out_w - w - before)), mode="edge")
    return values


def apply_zoom(pixels: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return pixels.copy()
    h, w = pixels.shape
    zh = max(1, int(round(h * factor)))
    zw = max(1, int(round(w * factor)))
    resized = resize_bilinear(pixels, zh, zw)
    return quantize_u8(_fit_center(resized, h, w))


def apply_chain(pixels: np.ndarray, chain: AugmentationChain) -> np.ndarray:
    out = apply_zoom(pixels, chain.zoom)
    out = apply_shine(out, chain.shine)
    out = apply_shift(out, chain.dx, chain.dy)
    if chain.flip_h:
        out = out[:, ::-1]
    if chain.flip_v:
        out = out[::-1, :]
    return np.ascontiguousarray(out)


@dataclass(frozen=True, eq=False)
class AugmentedPiece:
    """One augmented variant of a piece, carrying its chain descriptor."""

    piece_id: str
    chain: AugmentationChain
    pixels: np.ndarray
    class_label: int | None
    scheme_id: str | None

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def augment_piece(
    piece: PieceImage, params: AugmentationParams, zoom_enabled: bool
) -> list[AugmentedPiece]:
    """Apply every chain of the configured product to one piece."""
    return [
        AugmentedPiece(
            piece_id=piece.piece_id,
            chain=chain,
            pixels=apply_chain(piece.pixels, chain),
            class_label=piece.class_label,
            scheme_id=piece.scheme_id,
        )
        for chain in enumerate_chains(params, zoom_enabled)
    ]
