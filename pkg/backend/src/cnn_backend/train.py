"""Fine-tuning driver: one job file in, interchange files out.

Determinism is best-effort per platform: all RNGs are seeded from the run
manifest's train_seed, batches are shuffled by a seeded generator, no
worker processes are involved, and compute runs single-threaded by default
(parallel reduction order varies with thread count; set
CNN_BACKEND_NUM_THREADS to trade reproducibility for speed).  Identical
hardware and library versions then reproduce the loss curve bit for bit.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .manifest import (
    FAMILY_CLASSES,
    Dataset,
    Job,
    JobError,
    Sample,
    load_dataset,
    load_external_samples,
    load_job,
    load_run_manifest,
    write_predictions,
)
from .models import NORM_MEAN, NORM_STD, build_model, make_optimizer


def to_batch_tensor(samples: list[Sample], input_resize: int) -> torch.Tensor:
    """Grayscale tiles -> normalized 3-channel float tensor at the model's input size."""
    arr = np.stack([s.pixels for s in samples]).astype(np.float32) / 255.0
    x = torch.from_numpy(arr).unsqueeze(1)  # (N, 1, s, s)
    if x.shape[-1] != input_resize:
        x = F.interpolate(x, size=(input_resize, input_resize), mode="bilinear", align_corners=False)
    x = x.repeat(1, 3, 1, 1)
    mean = torch.tensor(NORM_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(NORM_STD).view(1, 3, 1, 1)
    return (x - mean) / std


def _logits(output) -> torch.Tensor:
    # inception_v3 returns (logits, aux_logits) in train mode.
    if isinstance(output, tuple):
        return output[0]
    if hasattr(output, "logits"):
        return output.logits
    return output


def _predict_rows(model, samples, input_resize, batch_size, labeled=True) -> list[dict]:
    rows = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            logits = _logits(model(to_batch_tensor(chunk, input_resize)))
            scores = logits.detach().numpy().astype(np.float64)
            for sample, raw in zip(chunk, scores):
                rows.append(
                    {
                        "sample_id": sample.sample_id,
                        "true_class": sample.true_class if labeled else None,
                        "raw_scores": [float(v) for v in raw],
                        "predicted_class": int(np.argmax(raw)) + 1,
                    }
                )
    return rows


def _validate(job: Job, dataset: Dataset, run_manifest: dict) -> None:
    dataset_type = run_manifest["dataset_type"]
    if dataset_type != dataset.dataset_type or run_manifest["seed"] != dataset.seed:
        raise JobError(
            f"run manifest names ({dataset_type}, {run_manifest['seed']}) but the dataset "
            f"is ({dataset.dataset_type}, {dataset.seed})"
        )
    expected_n = FAMILY_CLASSES.get(dataset_type)
    if expected_n is None:
        raise JobError(f"unknown dataset type {dataset_type!r}")
    if expected_n != dataset.n_classes:
        raise JobError(
            f"dataset declares {dataset.n_classes} classes but type {dataset_type!r} "
            f"implies {expected_n}"
        )
    if not dataset.train or not dataset.test:
        raise JobError("dataset needs non-empty train and test partitions")


def fine_tune(job_path: str | Path) -> Path:
    """Train per the run manifest and write every interchange file; returns output_dir."""
    job = load_job(job_path)
    dataset = load_dataset(job.dataset_manifest)
    run_manifest = load_run_manifest(job.run_manifest)
    _validate(job, dataset, run_manifest)

    config = run_manifest["training_config"]
    epochs = int(config["epochs"])
    batch_size = int(config["batch_size"])
    input_resize = int(config["input_resize"])
    train_seed = int(config["train_seed"])

    torch.set_num_threads(int(os.environ.get("CNN_BACKEND_NUM_THREADS", "1")))
    torch.manual_seed(train_seed)
    np.random.seed(train_seed % 2**32)
    model = build_model(run_manifest["model_id"], dataset.n_classes, input_resize)
    optimizer = make_optimizer(config["optimizer_name"], model, float(config["learning_rate"]))

    labels = torch.tensor([s.true_class - 1 for s in dataset.train], dtype=torch.long)
    shuffler = torch.Generator().manual_seed(train_seed)
    losses = []
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(dataset.train), generator=shuffler)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            batch = [dataset.train[i] for i in idx.tolist()]
            x = to_batch_tensor(batch, input_resize)
            y = labels[idx]
            optimizer.zero_grad()
            logits = _logits(model(x))
            loss = F.cross_entropy(logits, y)
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        losses.append(epoch_loss / n_batches)
        model.train()

    out_dir = job.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_predictions(out_dir / "predictions.jsonl", _predict_rows(model, dataset.test, input_resize, batch_size))
    (out_dir / "loss_curve.json").write_text(json.dumps(losses) + "\n")

    for ext_path in job.external_sets:
        set_id, samples = load_external_samples(ext_path)
        rows = _predict_rows(model, samples, input_resize, batch_size, labeled=False)
        write_predictions(out_dir / f"external_{set_id}.jsonl", rows)

    torch.save(model.state_dict(), out_dir / "weights.pt")
    (out_dir / "model_info.json").write_text(
        json.dumps(
            {
                "model_id": run_manifest["model_id"],
                "n_classes": dataset.n_classes,
                "input_resize": input_resize,
                "tile_size": dataset.tile_size,
                "dataset_manifest": str(job.dataset_manifest.resolve()),
            },
            indent=2,
        )
        + "\n"
    )
    return out_dir
