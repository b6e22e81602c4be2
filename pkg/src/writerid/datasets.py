"""Seeded piece-level splitting, square tiling, and dataset family assembly.

The pipeline order is fixed: pieces are split into train and test first,
both halves are augmented independently, the square tile size is the
minimum over the min-dimension of *all* augmented pieces, and every
augmented piece is then tiled on a stride grid.  Randomness exists only in
the split, driven by the documented SplitMix64 stream, so a dataset is a
pure function of (pieces, spec).
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentationParams, augment_piece
from .annotations import PieceImage
from .errors import AnnotationParseError, ValidationError
from .imgio import load_gray, save_gray
from .prng import SplitMix64

# dataset_type -> (zoom_enabled, stride_px, n_classes)
DATASET_FAMILIES: dict[str, tuple[bool, int, int]] = {
    "v01": (False, 20, 4),
    "v02": (True, 20, 4),
    "v03": (False, 10, 4),
    "v04": (True, 10, 4),
    "v001": (False, 20, 8),
    "v002": (True, 20, 8),
    "v003": (False, 10, 8),
    "v004": (True, 10, 8),
}

DATASET_MANIFEST_FORMAT = "writerid-dataset/1"
EXTERNAL_MANIFEST_FORMAT = "writerid-external/1"


@dataclass(frozen=True)
class DatasetSpec:
    dataset_type: str
    zoom_enabled: bool
    stride_px: int
    scheme_id: str
    n_classes: int
    seed: int
    split_ratio: float = 0.8
    augmentation: AugmentationParams = field(default_factory=AugmentationParams)

    def __post_init__(self) -> None:
        if self.dataset_type not in DATASET_FAMILIES:
            raise ValidationError(
                f"unknown dataset type {self.dataset_type!r}; "
                f"expected one of {sorted(DATASET_FAMILIES)}"
            )
        zoom, stride, n = DATASET_FAMILIES[self.dataset_type]
        if (self.zoom_enabled, self.stride_px, self.n_classes) != (zoom, stride, n):
            raise ValidationError(
                f"dataset type {self.dataset_type!r} implies zoom={zoom}, "
                f"stride={stride}, n_classes={n}"
            )
        if not 0.0 < self.split_ratio < 1.0:
            raise ValidationError("split_ratio must be in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must fit in 64 unsigned bits")

    @classmethod
    def from_type(
        cls,
        dataset_type: str,
        scheme_id: str,
        seed: int,
        split_ratio: float = 0.8,
        augmentation: AugmentationParams | None = None,
    ) -> "DatasetSpec":
        if dataset_type not in DATASET_FAMILIES:
            raise ValidationError(f"unknown dataset type {dataset_type!r}")
        zoom, stride, n = DATASET_FAMILIES[dataset_type]
        return cls(
            dataset_type=dataset_type,
            zoom_enabled=zoom,
            stride_px=stride,
            scheme_id=scheme_id,
            n_classes=n,
            seed=seed,
            split_ratio=split_ratio,
            augmentation=augmentation or AugmentationParams(),
        )

    def to_json(self) -> dict:
        return {
            "dataset_type": self.dataset_type,
            "zoom_enabled": self.zoom_enabled,
            "stride_px": self.stride_px,
            "scheme_id": self.scheme_id,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "split_ratio": self.split_ratio,
            "augmentation": self.augmentation.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetSpec":
        return cls(
            dataset_type=doc["dataset_type"],
            zoom_enabled=doc["zoom_enabled"],
            stride_px=doc["stride_px"],
            scheme_id=doc["scheme_id"],
            n_classes=doc["n_classes"],
            seed=doc["seed"],
            split_ratio=doc["split_ratio"],
            augmentation=AugmentationParams.from_json(doc["augmentation"]),
        )


@dataclass(frozen=True)
class Provenance:
    piece_id: str
    chain: str
    offset_x: int
    offset_y: int


@dataclass(frozen=True, eq=False)
class TileSample:
    sample_id: str
    pixels: np.ndarray
    true_class: int | None
    provenance: Provenance
    partition: str  # "train" | "test" | "external"

    def __post_init__(self) -> None:
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValidationError(f"tile {self.sample_id!r} is not square")
        self.pixels.setflags(write=False)


@dataclass(eq=False)
class TileDataset:
    spec: DatasetSpec
    tile_size: int
    train: list[TileSample]
    test: list[TileSample]
    counts: dict[str, dict[int, int]]

    @property
    def n_samples(self) -> int:
        return len(self.train) + len(self.test)


@dataclass(eq=False)
class ExternalTileSet:
    """Unlabeled square tiles cut directly from held-out regions (no augmentation)."""

    set_id: str
    tile_size: int
    stride_px: int
    tiles: list[TileSample]
    region_ids: tuple[str, ...]


def split_pieces(
    pieces: list[PieceImage], ratio: float, seed: int
) -> tuple[list[PieceImage], list[PieceImage]]:
    """Per-class seeded split; each class keeps ceil((1-ratio)*k) test pieces.

    Classes are processed in ascending label order against one SplitMix64
    stream, so the partition depends only on (piece order, seed).
    """
    if not 0.0 < ratio < 1.0:
        raise ValidationError("split ratio must be in (0, 1)")
    by_class: dict[int, list[PieceImage]] = {}
    for piece in pieces:
        if piece.class_label is None:
            raise ValidationError(f"piece {piece.piece_id!r} is unlabeled")
        by_class.setdefault(piece.class_label, []).append(piece)
    rng = SplitMix64(seed)
    train: list[PieceImage] = []
    test: list[PieceImage] = []
    for label in sorted(by_class):
        group = list(by_class[label])
        if len(group) < 2:
            raise ValidationError(
                f"class {label} has {len(group)} piece(s); at least 2 required to split"
            )
        n_test = math.ceil((1.0 - ratio) * len(group))
        if n_test >= len(group):
            raise ValidationError(f"class {label}: split leaves no training pieces")
        rng.shuffle(group)
        train.extend(group[: len(group) - n_test])
        test.extend(group[len(group) - n_test :])
    return train, test


def compute_tile_size(pieces) -> int:
    """min over pieces of min(width, height); errors on an empty list."""
    if not pieces:
        raise ValidationError("cannot size tiles from an empty piece list")
    return min(min(p.width, p.height) for p in pieces)


def tile_offsets(width: int, height: int, size: int, stride: int) -> list[tuple[int, int]]:
    """Row-major grid offsets (i*stride, j*stride) where the window fits."""
    if size > min(width, height):
        raise ValidationError(f"tile size {size} exceeds piece dimensions {width}x{height}")
    if stride < 1:
        raise ValidationError("stride must be positive")
    return [
        (ox, oy)
        for oy in range(0, height - size + 1, stride)
        for ox in range(0, width - size + 1, stride)
    ]


def tile(pixels: np.ndarray, size: int, stride: int) -> list[tuple[int, int, np.ndarray]]:
    """Cut s x s windows on the stride grid; windows copy their source bytes."""
    h, w = pixels.shape
    return [
        (ox, oy, pixels[oy : oy + size, ox : ox + size].copy())
        for ox, oy in tile_offsets(w, h, size, stride)
    ]


def _sample_id(piece_id: str, chain: str, ox: int, oy: int) -> str:
    return f"{piece_id}#{chain}#x{ox}y{oy}"


def _tiles_for(aug_pieces, size: int, stride: int, partition: str) -> list[TileSample]:
    samples = []
    for ap in aug_pieces:
        chain = ap.chain.describe()
        for ox, oy, window in tile(ap.pixels, size, stride):
            samples.append(
                TileSample(
                    sample_id=_sample_id(ap.piece_id, chain, ox, oy),
                    pixels=window,
                    true_class=ap.class_label,
                    provenance=Provenance(ap.piece_id, chain, ox, oy),
                    partition=partition,
                )
            )
    return samples


def build_dataset(pieces: list[PieceImage], spec: DatasetSpec) -> TileDataset:
    """Split -> augment both halves -> size tiles over all augmented pieces -> tile."""
    labels = {p.class_label for p in pieces}
    expected = set(range(1, spec.n_classes + 1))
    if not expected <= labels:
        raise ValidationError(
            f"pieces cover classes {sorted(l for l in labels if l is not None)}, "
            f"but scheme {spec.scheme_id!r} needs {sorted(expected)}"
        )
    if not labels <= expected:
        raise ValidationError(f"piece labels {sorted(labels - expected)} outside the scheme")
    train_pieces, test_pieces = split_pieces(pieces, spec.split_ratio, spec.seed)
    aug_train = [
        ap for p in train_pieces for ap in augment_piece(p, spec.augmentation, spec.zoom_enabled)
    ]
    aug_test = [
        ap for p in test_pieces for ap in augment_piece(p, spec.augmentation, spec.zoom_enabled)
    ]
    size = compute_tile_size(aug_train + aug_test)
    train = _tiles_for(aug_train, size, spec.stride_px, "train")
    test = _tiles_for(aug_test, size, spec.stride_px, "test")
    counts = {
        "train": _class_counts(train),
        "test": _class_counts(test),
    }
    for label in expected:
        if counts["test"].get(label, 0) < 1:
            raise ValidationError(f"class {label} ended up with no test tiles")
    return TileDataset(spec=spec, tile_size=size, train=train, test=test, counts=counts)


def _class_counts(samples: list[TileSample]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for s in samples:
        counts[s.true_class] = counts.get(s.true_class, 0) + 1
    return dict(sorted(counts.items()))


def build_external_set(
    pieces: list[PieceImage], set_id: str, tile_size: int, stride: int
) -> ExternalTileSet:
    """Tile held-out pieces directly (no augmentation, no labels)."""
    tiles = []
    for piece in pieces:
        for ox, oy, window in tile(piece.pixels, tile_size, stride):
            tiles.append(
                TileSample(
                    sample_id=_sample_id(piece.piece_id, "none", ox, oy),
                    pixels=window,
                    true_class=None,
                    provenance=Provenance(piece.piece_id, "none", ox, oy),
                    partition="external",
                )
            )
    if not tiles:
        raise ValidationError(f"external set {set_id!r} produced no tiles")
    return ExternalTileSet(
        set_id=set_id,
        tile_size=tile_size,
        stride_px=stride,
        tiles=tiles,
        region_ids=tuple(p.piece_id for p in pieces),
    )


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def _tile_key(pixels: np.ndarray) -> str:
    digest = hashlib.sha256()
    digest.update(f"tile:{pixels.shape[0]}x{pixels.shape[1]}:".encode())
    digest.update(pixels.tobytes())
    return digest.hexdigest()[:24]


def _sample_row(sample: TileSample, storage: str, tiles_dir: Path | None, out_dir: Path | None) -> dict:
    row = {
        "sample_id": sample.sample_id,
        "partition": sample.partition,
        "true_class": sample.true_class,
        "provenance": {
            "piece_id": sample.provenance.piece_id,
            "chain": sample.provenance.chain,
            "offset_x": sample.provenance.offset_x,
            "offset_y": sample.provenance.offset_y,
        },
    }
    if storage == "inline":
        row["pixels_b64"] = base64.b64encode(sample.pixels.tobytes()).decode("ascii")
    else:
        name = _tile_key(sample.pixels) + ".png"
        path = tiles_dir / name
        if not path.exists():
            save_gray(path, sample.pixels)
        row["pixels_path"] = str(path.relative_to(out_dir))
    return row


def _rows_to_samples(rows, tile_size: int, base_dir: Path, *, expect_partitions) -> list[TileSample]:
    samples = []
    for row in rows:
        partition = row["partition"]
        if partition not in expect_partitions:
            raise ValidationError(f"sample {row['sample_id']!r}: unexpected partition {partition!r}")
        if "pixels_b64" in row:
            buf = base64.b64decode(row["pixels_b64"])
            pixels = np.frombuffer(buf, dtype=np.uint8).reshape(tile_size, tile_size).copy()
        elif "pixels_path" in row:
            pixels = load_gray(base_dir / row["pixels_path"])
        else:
            raise AnnotationParseError(f"sample {row['sample_id']!r}: no pixel payload")
        if pixels.shape != (tile_size, tile_size):
            raise ValidationError(f"sample {row['sample_id']!r}: pixels are not {tile_size}px square")
        prov = row["provenance"]
        samples.append(
            TileSample(
                sample_id=row["sample_id"],
                pixels=pixels,
                true_class=row["true_class"],
                provenance=Provenance(
                    prov["piece_id"], prov["chain"], prov["offset_x"], prov["offset_y"]
                ),
                partition=partition,
            )
        )
    return samples


def save_dataset(ds: TileDataset, out_dir: str | Path, storage: str = "png") -> Path:
    """Write manifest.json (and tiles/*.png unless storage="inline"); returns the manifest path."""
    if storage not in ("png", "inline"):
        raise ValidationError(f"unknown storage mode {storage!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tiles_dir = out_dir / "tiles"
    if storage == "png":
        tiles_dir.mkdir(exist_ok=True)
    manifest = {
        "format": DATASET_MANIFEST_FORMAT,
        "spec": ds.spec.to_json(),
        "tile_size": ds.tile_size,
        "counts": {
            part: {str(k): v for k, v in ds.counts[part].items()} for part in ("train", "test")
        },
        "samples": [
            _sample_row(s, storage, tiles_dir, out_dir) for s in (*ds.train, *ds.test)
        ],
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path: str | Path) -> TileDataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AnnotationParseError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    if doc.get("format") != DATASET_MANIFEST_FORMAT:
        raise AnnotationParseError(f"{manifest_path}: not a dataset manifest")
    spec = DatasetSpec.from_json(doc["spec"])
    tile_size = int(doc["tile_size"])
    samples = _rows_to_samples(
        doc["samples"], tile_size, manifest_path.parent, expect_partitions=("train", "test")
    )
    train = [s for s in samples if s.partition == "train"]
    test = [s for s in samples if s.partition == "test"]
    ds = TileDataset(
        spec=spec,
        tile_size=tile_size,
        train=train,
        test=test,
        counts={"train": _class_counts(train), "test": _class_counts(test)},
    )
    declared = {
        part: {int(k): v for k, v in doc["counts"][part].items()} for part in ("train", "test")
    }
    if declared != ds.counts:
        raise ValidationError(f"{manifest_path}: declared counts disagree with samples")
    return ds


def save_external_set(ext: ExternalTileSet, out_path: str | Path, storage: str = "png") -> Path:
    out_path = Path(out_path)
    out_dir = out_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    tiles_dir = out_dir / "tiles"
    if storage == "png":
        tiles_dir.mkdir(exist_ok=True)
    doc = {
        "format": EXTERNAL_MANIFEST_FORMAT,
        "set_id": ext.set_id,
        "tile_size": ext.tile_size,
        "stride_px": ext.stride_px,
        "region_ids": list(ext.region_ids),
        "samples": [_sample_row(s, storage, tiles_dir, out_dir) for s in ext.tiles],
    }
    out_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return out_path


def load_external_set(path: str | Path) -> ExternalTileSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AnnotationParseError(f"cannot read external tile manifest {path}: {exc}") from exc
    if doc.get("format") != EXTERNAL_MANIFEST_FORMAT:
        raise AnnotationParseError(f"{path}: not an external tile manifest")
    tile_size = int(doc["tile_size"])
    tiles = _rows_to_samples(doc["samples"], tile_size, path.parent, expect_partitions=("external",))
    return ExternalTileSet(
        set_id=doc["set_id"],
        tile_size=tile_size,
        stride_px=int(doc["stride_px"]),
        tiles=tiles,
        region_ids=tuple(doc.get("region_ids", ())),
    )
