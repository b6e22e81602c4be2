from __future__ import annotations

import base64
import json
import os
from pathlib import Path

import numpy as np
import pytest

os.environ.setdefault("CNN_BACKEND_NO_PRETRAINED", "1")  # offline sandbox: skip the fetch attempt

TILE = 32


def _tile_row(rng, sample_id, partition, cls):
    yy, xx = np.mgrid[0:TILE, 0:TILE]
    angle = {1: 0.0, 2: np.pi / 4, 3: np.pi / 2, 4: 3 * np.pi / 4}[cls]
    axis = xx * np.cos(angle) + yy * np.sin(angle)
    base = 128 + 70 * np.cos(2 * np.pi * axis / 9.0) + rng.normal(0, 12, size=(TILE, TILE))
    pixels = np.clip(base, 0, 255).astype(np.uint8)
    return {
        "sample_id": sample_id,
        "partition": partition,
        "true_class": cls,
        "provenance": {
            "piece_id": sample_id.split("#")[0],
            "chain": "none",
            "offset_x": 0,
            "offset_y": 0,
        },
        "pixels_b64": base64.b64encode(pixels.tobytes()).decode("ascii"),
    }


def write_toy_dataset(root: Path) -> Path:
    """A 40-tile 4-class dataset manifest (7 train + 3 test per class, 32 px tiles)."""
    rng = np.random.default_rng(7)
    samples = []
    for cls in range(1, 5):
        for k in range(7):
            samples.append(_tile_row(rng, f"c{cls}t{k}#none#x0y0", "train", cls))
        for k in range(3):
            samples.append(_tile_row(rng, f"c{cls}e{k}#none#x0y0", "test", cls))
    manifest = {
        "format": "writerid-dataset/1",
        "spec": {
            "dataset_type": "v01",
            "zoom_enabled": False,
            "stride_px": 20,
            "scheme_id": "toy4",
            "n_classes": 4,
            "seed": 1033,
            "split_ratio": 0.8,
            "augmentation": {
                "shine_factors": [1.0],
                "shift_offsets_h": [0],
                "shift_offsets_v": [0],
                "zoom_factors": [1.0],
            },
        },
        "tile_size": TILE,
        "counts": {
            "train": {str(c): 7 for c in range(1, 5)},
            "test": {str(c): 3 for c in range(1, 5)},
        },
        "samples": samples,
    }
    root.mkdir(parents=True, exist_ok=True)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


def write_external_set(root: Path, set_id="probe", n=3) -> Path:
    rng = np.random.default_rng(11)
    samples = []
    for k in range(n):
        pixels = rng.integers(0, 256, size=(TILE, TILE), dtype=np.uint8)
        samples.append(
            {
                "sample_id": f"x{k}#none#x0y0",
                "partition": "external",
                "true_class": None,
                "provenance": {"piece_id": f"x{k}", "chain": "none", "offset_x": 0, "offset_y": 0},
                "pixels_b64": base64.b64encode(pixels.tobytes()).decode("ascii"),
            }
        )
    doc = {
        "format": "writerid-external/1",
        "set_id": set_id,
        "tile_size": TILE,
        "stride_px": 20,
        "region_ids": [f"x{k}" for k in range(n)],
        "samples": samples,
    }
    path = root / f"external_{set_id}.json"
    path.write_text(json.dumps(doc))
    return path


def write_run_manifest(path: Path, model_id="resnet50", epochs=2, input_resize=64, **overrides):
    doc = {
        "model_id": model_id,
        "dataset_type": "v01",
        "seed": 1033,
        "training_config": {
            "epochs": epochs,
            "optimizer_name": "adam",
            "learning_rate": 1e-3,
            "batch_size": 16,
            "train_seed": 1,
            "input_resize": input_resize,
        },
        "status": "pending",
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


def write_job(path: Path, dataset_manifest: Path, run_manifest: Path, out_dir: Path, externals=()):
    doc = {
        "dataset_manifest": str(dataset_manifest),
        "run_manifest": str(run_manifest),
        "output_dir": str(out_dir),
        "external_sets": [str(p) for p in externals],
    }
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="session")
def toy_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    dataset = write_toy_dataset(root)
    external = write_external_set(root)
    return {"root": root, "dataset": dataset, "external": external}


@pytest.fixture(scope="session")
def trained_vgg_run(toy_workspace, tmp_path_factory):
    """A 1-epoch vgg19 run used by the CAM tests."""
    from cnn_backend.train import fine_tune

    root = tmp_path_factory.mktemp("vgg")
    manifest = write_run_manifest(root / "run_manifest.json", model_id="vgg19", epochs=1)
    job = write_job(root / "job.json", toy_workspace["dataset"], manifest, root / "out")
    return fine_tune(job)
