"""Readers for the toolkit's file-based interchange formats.

This package deliberately never imports the orchestrating toolkit: the
dataset manifest, run manifest, and job file formats below are the whole
contract between the two sides.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# dataset_type -> expected class count (the v0x / v00x naming convention)
FAMILY_CLASSES = {
    "v01": 4, "v02": 4, "v03": 4, "v04": 4,
    "v001": 8, "v002": 8, "v003": 8, "v004": 8,
}


class JobError(ValueError):
    """Any problem that should abort the job with a diagnostic exit."""


@dataclass
class Sample:
    sample_id: str
    pixels: np.ndarray  # (s, s) uint8
    true_class: int | None
    partition: str


@dataclass
class Dataset:
    n_classes: int
    dataset_type: str
    seed: int
    tile_size: int
    train: list[Sample]
    test: list[Sample]


@dataclass
class Job:
    dataset_manifest: Path
    run_manifest: Path
    output_dir: Path
    external_sets: list[Path]


def _decode_pixels(row: dict, tile_size: int, base_dir: Path) -> np.ndarray:
    if "pixels_b64" in row:
        buf = base64.b64decode(row["pixels_b64"])
        return np.frombuffer(buf, dtype=np.uint8).reshape(tile_size, tile_size).copy()
    if "pixels_path" in row:
        from PIL import Image

        with Image.open(base_dir / row["pixels_path"]) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    raise JobError(f"sample {row.get('sample_id')!r} has no pixel payload")


def load_job(path: str | Path) -> Job:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise JobError(f"cannot read job file {path}: {exc}") from exc
    for key in ("dataset_manifest", "run_manifest", "output_dir"):
        if key not in doc:
            raise JobError(f"job file missing {key!r}")
    return Job(
        dataset_manifest=Path(doc["dataset_manifest"]),
        run_manifest=Path(doc["run_manifest"]),
        output_dir=Path(doc["output_dir"]),
        external_sets=[Path(p) for p in doc.get("external_sets", [])],
    )


def load_dataset(manifest_path: Path) -> Dataset:
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise JobError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    if doc.get("format") != "writerid-dataset/1":
        raise JobError(f"{manifest_path}: not a dataset manifest")
    spec = doc["spec"]
    tile_size = int(doc["tile_size"])
    train: list[Sample] = []
    test: list[Sample] = []
    for row in doc["samples"]:
        sample = Sample(
            sample_id=row["sample_id"],
            pixels=_decode_pixels(row, tile_size, manifest_path.parent),
            true_class=row["true_class"],
            partition=row["partition"],
        )
        if sample.partition == "train":
            train.append(sample)
        elif sample.partition == "test":
            test.append(sample)
        else:
            raise JobError(f"unexpected partition {sample.partition!r}")
    return Dataset(
        n_classes=int(spec["n_classes"]),
        dataset_type=spec["dataset_type"],
        seed=int(spec["seed"]),
        tile_size=tile_size,
        train=train,
        test=test,
    )


def load_external_samples(path: Path) -> tuple[str, list[Sample]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise JobError(f"cannot read external tile manifest {path}: {exc}") from exc
    if doc.get("format") != "writerid-external/1":
        raise JobError(f"{path}: not an external tile manifest")
    tile_size = int(doc["tile_size"])
    samples = [
        Sample(
            sample_id=row["sample_id"],
            pixels=_decode_pixels(row, tile_size, Path(path).parent),
            true_class=None,
            partition="external",
        )
        for row in doc["samples"]
    ]
    return doc["set_id"], samples


def load_run_manifest(path: Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise JobError(f"cannot read run manifest {path}: {exc}") from exc
    for key in ("model_id", "dataset_type", "seed", "training_config"):
        if key not in doc:
            raise JobError(f"run manifest missing {key!r}")
    return doc


def write_predictions(path: Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
