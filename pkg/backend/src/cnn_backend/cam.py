"""Class-activation-mapping overlays for fine-tuned runs.

Three algorithms probe the final convolutional feature stage:

  grad-cam   spatially-pooled class gradients weight the channel maps;
  layer-cam  positive gradients weight the maps element-wise;
  eigen-cam  the first principal component of the activations (class-free).

Each request processes a fixed batch of 10 samples with random seed 42;
weights are min-max normalized to [0, 1] before colorization, and every
overlay has the dimensions of its input tile.  Overlays are purely visual
artifacts; nothing downstream consumes them.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .manifest import JobError, load_dataset
from .models import build_model, target_layer
from .train import to_batch_tensor

ALGORITHMS = ("grad-cam", "eigen-cam", "layer-cam")
BATCH_SIZE = 10
DEFAULT_SEED = 42


@dataclass
class CamRequest:
    run_dir: Path
    algorithm: str
    target_class: int
    sample_ids: list[str]
    seed: int = DEFAULT_SEED
    output_dir: Path | None = None


def load_request(path: str | Path) -> CamRequest:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise JobError(f"cannot read CAM request {path}: {exc}") from exc
    for key in ("run_dir", "algorithm", "target_class", "sample_ids"):
        if key not in doc:
            raise JobError(f"CAM request missing {key!r}")
    return CamRequest(
        run_dir=Path(doc["run_dir"]),
        algorithm=doc["algorithm"],
        target_class=int(doc["target_class"]),
        sample_ids=list(doc["sample_ids"]),
        seed=int(doc.get("seed", DEFAULT_SEED)),
        output_dir=Path(doc["output_dir"]) if doc.get("output_dir") else None,
    )


class _Probe:
    """Forward/backward hooks on the target layer."""

    def __init__(self, layer: torch.nn.Module) -> None:
        self.activations: torch.Tensor | None = None
        self.gradients: torch.Tensor | None = None
        self._handles = [
            layer.register_forward_hook(self._forward),
            layer.register_full_backward_hook(self._backward),
        ]

    def _forward(self, module, args, output):
        self.activations = output.detach()

    def _backward(self, module, grad_input, grad_output):
        self.gradients = grad_output[0].detach()

    def remove(self):
        for h in self._handles:
            h.remove()


def _normalize(cam: np.ndarray) -> np.ndarray:
    lo, hi = float(cam.min()), float(cam.max())
    if hi <= lo:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def _cam_maps(algorithm: str, activations: torch.Tensor, gradients: torch.Tensor | None) -> np.ndarray:
    """Per-sample (H, W) maps from (N, C, H, W) activations."""
    acts = activations.numpy()
    if algorithm == "grad-cam":
        weights = gradients.numpy().mean(axis=(2, 3), keepdims=True)  # (N, C, 1, 1)
        cams = np.maximum((weights * acts).sum(axis=1), 0.0)
    elif algorithm == "layer-cam":
        positive_grads = np.maximum(gradients.numpy(), 0.0)
        cams = np.maximum((positive_grads * acts).sum(axis=1), 0.0)
    elif algorithm == "eigen-cam":
        n, c, h, w = acts.shape
        cams = np.empty((n, h, w))
        for k in range(n):
            flat = acts[k].reshape(c, h * w)
            flat = flat - flat.mean(axis=1, keepdims=True)
            _, _, vt = np.linalg.svd(flat, full_matrices=False)
            component = vt[0]
            if component[np.argmax(np.abs(component))] < 0:
                component = -component
            cams[k] = component.reshape(h, w)
        cams = np.maximum(cams, 0.0)
    else:
        raise JobError(f"unknown CAM algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    return cams


def _overlay(tile: np.ndarray, cam: np.ndarray) -> np.ndarray:
    """Blend the jet-colorized weight map over the grayscale tile."""
    size = tile.shape[0]
    cam_t = torch.from_numpy(cam)[None, None].float()
    cam_up = F.interpolate(cam_t, size=(size, size), mode="bilinear", align_corners=False)
    heat = _normalize(cam_up[0, 0].numpy())
    color = colormaps["jet"](heat)[..., :3]  # (s, s, 3) in [0, 1]
    gray = np.repeat(tile[..., None].astype(np.float64) / 255.0, 3, axis=2)
    blended = 0.5 * color + 0.5 * gray
    return (blended * 255.0).round().astype(np.uint8)


def generate_cam(request: CamRequest) -> list[Path]:
    """Write one overlay PNG per sample under <output>/<algorithm>/."""
    if request.algorithm not in ALGORITHMS:
        raise JobError(f"unknown CAM algorithm {request.algorithm!r}; expected one of {ALGORITHMS}")
    if len(request.sample_ids) != BATCH_SIZE:
        raise JobError(
            f"CAM requests take a batch of exactly {BATCH_SIZE} samples, got {len(request.sample_ids)}"
        )
    info_path = request.run_dir / "model_info.json"
    weights_path = request.run_dir / "weights.pt"
    if not info_path.exists() or not weights_path.exists():
        raise JobError(f"no fine-tuned weights under {request.run_dir}")
    info = json.loads(info_path.read_text())
    if not 1 <= request.target_class <= info["n_classes"]:
        raise JobError(f"target class {request.target_class} outside 1..{info['n_classes']}")

    torch.set_num_threads(int(os.environ.get("CNN_BACKEND_NUM_THREADS", "1")))
    torch.manual_seed(request.seed)
    np.random.seed(request.seed % 2**32)

    dataset = load_dataset(Path(info["dataset_manifest"]))
    by_id = {s.sample_id: s for s in (*dataset.train, *dataset.test)}
    missing = [sid for sid in request.sample_ids if sid not in by_id]
    if missing:
        raise JobError(f"sample ids not in the dataset: {missing[:3]}")
    samples = [by_id[sid] for sid in request.sample_ids]

    model = build_model(info["model_id"], info["n_classes"], info["input_resize"])
    model.load_state_dict(torch.load(weights_path, weights_only=True))
    model.eval()

    probe = _Probe(target_layer(model, info["model_id"]))
    try:
        x = to_batch_tensor(samples, info["input_resize"])
        needs_grad = request.algorithm in ("grad-cam", "layer-cam")
        if needs_grad:
            logits = model(x)
            if isinstance(logits, tuple):
                logits = logits[0]
            score = logits[:, request.target_class - 1].sum()
            model.zero_grad()
            score.backward()
            gradients = probe.gradients
        else:
            with torch.no_grad():
                model(x)
            gradients = None
        cams = _cam_maps(request.algorithm, probe.activations, gradients)
    finally:
        probe.remove()

    out_root = request.output_dir or (request.run_dir / "cam")
    out_dir = out_root / request.algorithm
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for sample, cam in zip(samples, cams):
        overlay = _overlay(sample.pixels, _normalize(cam))
        safe = sample.sample_id.replace("/", "_").replace("#", "_")
        path = out_dir / f"{safe}.png"
        Image.fromarray(overlay, mode="RGB").save(path)
        written.append(path)
    return written
