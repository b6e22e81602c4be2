"""Region annotations, class schemes, and rectangular piece extraction.

An annotation file declares three things: the class schemes in play, the
source images by id, and quadrilateral regions marking two-line sentences
on those images.  Labeled regions feed dataset construction; unlabeled
regions (allowed only on request) describe held-out material whose writer
is to be attributed later.

The extraction step resamples a (possibly slightly rotated) quadrilateral
onto an axis-aligned rectangle so that the writing direction becomes
horizontal.  Output dimensions depend only on the quad geometry: the
rounded mean lengths of the two opposite edge pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import AnnotationParseError, ValidationError
from .imgio import load_gray
from .imgops import bilinear_sample, quantize_u8

AUTHOR1 = "Author1"
AUTHOR2 = "Author2"


def canonical_author_map(n_classes: int) -> dict[int, str]:
    """The fixed class-to-author mapping: the lower half of the class range
    belongs to Author1, the upper half to Author2."""
    if n_classes not in (4, 8):
        raise ValidationError(f"n_classes must be 4 or 8, got {n_classes}")
    half = n_classes // 2
    return {c: (AUTHOR1 if c <= half else AUTHOR2) for c in range(1, n_classes + 1)}


@dataclass(frozen=True)
class ClassScheme:
    """A 4- or 8-class partition of the writing area, each class owned by one author."""

    scheme_id: str
    n_classes: int
    author_of_class: Mapping[int, str] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        canonical = canonical_author_map(self.n_classes)
        mapping = self.author_of_class
        if mapping is None:
            mapping = canonical
        mapping = {int(k): str(v) for k, v in mapping.items()}
        if mapping != canonical:
            raise ValidationError(
                f"scheme {self.scheme_id!r}: author map must assign classes "
                f"1..{self.n_classes // 2} to {AUTHOR1} and the rest to {AUTHOR2}"
            )
        object.__setattr__(self, "author_of_class", mapping)

    def author_of(self, class_label: int) -> str:
        try:
            return self.author_of_class[class_label]
        except KeyError:
            raise ValidationError(
                f"class {class_label} not in scheme {self.scheme_id!r}"
            ) from None


@dataclass(frozen=True, eq=False)
class SourceImage:
    """An 8-bit luminance photograph that regions are annotated on."""

    id: str
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise ValidationError(f"source {self.id!r}: pixels must be 2-D uint8")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValidationError(f"source {self.id!r}: empty image")
        self.pixels.setflags(write=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class RegionAnnotation:
    """One quadrilateral two-line sentence region on a source image.

    Corners run clockwise as displayed (y axis pointing down), starting at
    the top-left of the writing: top-left, top-right, bottom-right,
    bottom-left.  `class_label` is None only for unlabeled (external)
    regions.
    """

    piece_id: str
    source_id: str
    quad: np.ndarray
    class_label: int | None
    scheme_id: str | None
    line_pair_index: int

    def __post_init__(self) -> None:
        quad = np.array(self.quad, dtype=np.float64)  # copy: callers keep their arrays
        if quad.shape != (4, 2) or not np.all(np.isfinite(quad)):
            raise ValidationError(
                f"region {self.piece_id!r}: quad must be four finite (x, y) points"
            )
        quad.setflags(write=False)
        object.__setattr__(self, "quad", quad)
        if self.line_pair_index < 0:
            raise ValidationError(f"region {self.piece_id!r}: negative line_pair_index")


@dataclass(frozen=True, eq=False)
class PieceImage:
    """A de-rotated rectangular crop of one two-line sentence."""

    piece_id: str
    pixels: np.ndarray
    class_label: int | None
    scheme_id: str | None

    def __post_init__(self) -> None:
        self.pixels.setflags(write=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(eq=False)
class AnnotationSet:
    """Everything one annotation file declares, with sources loaded eagerly."""

    schemes: dict[str, ClassScheme]
    sources: dict[str, SourceImage]
    source_paths: dict[str, str]
    regions: list[RegionAnnotation]


def _cross_z(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float((a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]))


def quad_area(quad: np.ndarray) -> float:
    """Unsigned shoelace area of the quadrilateral, in square pixels."""
    x, y = quad[:, 0], quad[:, 1]
    return abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))) / 2.0


def validate_quad(quad: np.ndarray, width: int, height: int, piece_id: str = "?") -> None:
    """Check convexity, clockwise winding, image bounds, and non-degeneracy."""
    if np.any(quad[:, 0] < 0) or np.any(quad[:, 0] > width) or np.any(
        quad[:, 1] < 0
    ) or np.any(quad[:, 1] > height):
        raise ValidationError(
            f"region {piece_id!r}: quad corner outside the {width}x{height} source bounds"
        )
    crosses = [_cross_z(quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]) for i in range(4)]
    if any(c <= 0 for c in crosses):
        raise ValidationError(
            f"region {piece_id!r}: quad must be convex with corners clockwise as displayed"
        )
    if quad_area(quad) < 1.0:
        raise ValidationError(f"region {piece_id!r}: quad area below 1 px^2")


def quad_output_dims(quad: np.ndarray) -> tuple[int, int]:
    """(width, height) of the extracted piece: rounded means of opposite edges."""
    p0, p1, p2, p3 = quad
    top = float(np.hypot(*(p1 - p0)))
    bottom = float(np.hypot(*(p2 - p3)))
    right = float(np.hypot(*(p2 - p1)))
    left = float(np.hypot(*(p3 - p0)))
    width = int(round((top + bottom) / 2.0))
    height = int(round((right + left) / 2.0))
    return width, height


def extract_piece(img: SourceImage, ann: RegionAnnotation) -> PieceImage:
    """Resample the quad content onto an axis-aligned rectangle (bilinear).

    The quad is treated as the image of the unit square: position (u, v)
    maps to the corner blend (1-u)(1-v)p0 + u(1-v)p1 + uv*p2 + (1-u)v*p3,
    which for a rotated rectangle is an exact rigid mapping.  An
    axis-aligned quad with integer corners therefore yields the pixel
    sub-array unchanged.
    """
    if ann.source_id != img.id:
        raise ValidationError(
            f"region {ann.piece_id!r} annotates source {ann.source_id!r}, not {img.id!r}"
        )
    validate_quad(ann.quad, img.width, img.height, ann.piece_id)
    width, height = quad_output_dims(ann.quad)
    if width < 1 or height < 1:
        raise ValidationError(f"region {ann.piece_id!r}: degenerate quad")
    if width < height:
        raise ValidationError(
            f"region {ann.piece_id!r}: extracted piece would be taller than wide "
            f"({width}x{height}); two-line sentence regions run horizontally"
        )
    p0, p1, p2, p3 = ann.quad
    u = ((np.arange(width, dtype=np.float64) + 0.5) / width)[None, :]
    v = ((np.arange(height, dtype=np.float64) + 0.5) / height)[:, None]
    sx = (1 - u) * (1 - v) * p0[0] + u * (1 - v) * p1[0] + u * v * p2[0] + (1 - u) * v * p3[0]
    sy = (1 - u) * (1 - v) * p0[1] + u * (1 - v) * p1[1] + u * v * p2[1] + (1 - u) * v * p3[1]
    pixels = quantize_u8(bilinear_sample(img.pixels, sx, sy))
    return PieceImage(ann.piece_id, pixels, ann.class_label, ann.scheme_id)


def extract_all(aset: AnnotationSet, scheme_id: str) -> list[PieceImage]:
    """Extract every labeled piece belonging to one scheme, in file order."""
    pieces = []
    for ann in aset.regions:
        if ann.scheme_id == scheme_id and ann.class_label is not None:
            pieces.append(extract_piece(aset.sources[ann.source_id], ann))
    if not pieces:
        raise ValidationError(f"no labeled regions for scheme {scheme_id!r}")
    return pieces


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise AnnotationParseError(f"{context}: missing key {key!r}")
    return mapping[key]


def load_annotations(
    path: str | Path, *, allow_unlabeled: bool = False
) -> AnnotationSet:
    """Load and fully validate an annotation file.

    Source image paths resolve relative to the annotation file's directory.
    Structural problems raise AnnotationParseError; semantic ones (corners
    out of bounds, labels outside the scheme, duplicate ids) raise
    ValidationError.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AnnotationParseError(f"cannot read annotation file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise AnnotationParseError(f"{path}: top level must be an object")

    schemes: dict[str, ClassScheme] = {}
    for raw in _require(doc, "schemes", str(path)):
        if not isinstance(raw, dict):
            raise AnnotationParseError(f"{path}: scheme entries must be objects")
        sid = str(_require(raw, "id", "scheme"))
        if sid in schemes:
            raise ValidationError(f"duplicate scheme id {sid!r}")
        schemes[sid] = ClassScheme(
            scheme_id=sid,
            n_classes=int(_require(raw, "n_classes", f"scheme {sid!r}")),
            author_of_class=raw.get("author_of_class"),
        )

    sources: dict[str, SourceImage] = {}
    source_paths: dict[str, str] = {}
    for raw in _require(doc, "sources", str(path)):
        if not isinstance(raw, dict):
            raise AnnotationParseError(f"{path}: source entries must be objects")
        sid = str(_require(raw, "id", "source"))
        spath = str(_require(raw, "path", f"source {sid!r}"))
        if sid in sources:
            raise ValidationError(f"duplicate source id {sid!r}")
        resolved = Path(spath)
        if not resolved.is_absolute():
            resolved = path.parent / resolved
        try:
            pixels = load_gray(resolved)
        except FileNotFoundError as exc:
            raise ValidationError(f"source {sid!r}: image not found at {resolved}") from exc
        sources[sid] = SourceImage(sid, pixels)
        source_paths[sid] = spath

    regions: list[RegionAnnotation] = []
    seen_pieces: set[str] = set()
    for raw in _require(doc, "regions", str(path)):
        if not isinstance(raw, dict):
            raise AnnotationParseError(f"{path}: region entries must be objects")
        piece_id = str(_require(raw, "piece_id", "region"))
        if piece_id in seen_pieces:
            raise ValidationError(f"duplicate piece id {piece_id!r}")
        seen_pieces.add(piece_id)
        source_id = str(_require(raw, "source_id", f"region {piece_id!r}"))
        if source_id not in sources:
            raise ValidationError(f"region {piece_id!r}: unknown source {source_id!r}")
        quad_raw = _require(raw, "quad", f"region {piece_id!r}")
        try:
            quad = np.asarray(quad_raw, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise AnnotationParseError(f"region {piece_id!r}: quad is not numeric") from exc
        label = raw.get("class_label")
        scheme_id = raw.get("scheme_id")
        if label is None:
            if not allow_unlabeled:
                raise ValidationError(
                    f"region {piece_id!r}: class_label required (unlabeled regions "
                    "belong in a separate external-set file)"
                )
        else:
            label = int(label)
            if scheme_id is None:
                raise ValidationError(f"region {piece_id!r}: labeled region needs a scheme_id")
            scheme_id = str(scheme_id)
            if scheme_id not in schemes:
                raise ValidationError(f"region {piece_id!r}: unknown scheme {scheme_id!r}")
            if not 1 <= label <= schemes[scheme_id].n_classes:
                raise ValidationError(
                    f"region {piece_id!r}: class_label {label} outside "
                    f"1..{schemes[scheme_id].n_classes} of scheme {scheme_id!r}"
                )
        ann = RegionAnnotation(
            piece_id=piece_id,
            source_id=source_id,
            quad=quad,
            class_label=label,
            scheme_id=scheme_id if label is not None else (str(scheme_id) if scheme_id else None),
            line_pair_index=int(raw.get("line_pair_index", 0)),
        )
        src = sources[source_id]
        validate_quad(ann.quad, src.width, src.height, piece_id)
        regions.append(ann)

    return AnnotationSet(schemes=schemes, sources=sources, source_paths=source_paths, regions=regions)


def save_annotations(aset: AnnotationSet, path: str | Path) -> None:
    """Serialize an annotation set back to the file schema (images stay on disk)."""
    doc = {
        "schemes": [
            {
                "id": s.scheme_id,
                "n_classes": s.n_classes,
                "author_of_class": {str(k): v for k, v in sorted(s.author_of_class.items())},
            }
            for s in aset.schemes.values()
        ],
        "sources": [{"id": sid, "path": aset.source_paths[sid]} for sid in aset.sources],
        "regions": [
            {
                "piece_id": r.piece_id,
                "source_id": r.source_id,
                "quad": [[float(x), float(y)] for x, y in r.quad],
                "class_label": r.class_label,
                "scheme_id": r.scheme_id,
                "line_pair_index": r.line_pair_index,
            }
            for r in aset.regions
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
