"""Backend protocol, built-in baseline classifier, scoring, and convergence.

A run is identified by the triple (model_id, dataset_type, seed).  Any
classifier that can read a dataset manifest and write the predictions /
loss-curve files below can serve as a backend; deep models stay behind a
subprocess boundary and the built-in nearest-centroid baseline makes the
whole pipeline runnable at desk scale with no extra installs.

Interchange files per run directory:
  predictions.jsonl          one object per test tile
  loss_curve.json            JSON array, one loss per epoch
  run_manifest.json          the manifest with final status
  external_<set_id>.jsonl    predictions for each requested external tile set
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .datasets import ExternalTileSet, TileDataset, TileSample, load_external_set
from .errors import BackendError, ValidationError

DEFAULT_SEEDS = (1033, 1931, 2201, 4179, 9325)
BASELINE_MODEL_ID = "baseline-centroid"
_FEATURE_SIDE = 16


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    optimizer_name: str = "adam"
    learning_rate: float = 1e-4
    batch_size: int = 16
    train_seed: int = 1
    input_resize: int = 224

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "optimizer_name": self.optimizer_name,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "train_seed": self.train_seed,
            "input_resize": self.input_resize,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainingConfig":
        return cls(**doc)


def full_scale_training_config(model_id: str) -> TrainingConfig:
    """The full-scale fine-tuning preset: 50 epochs, Adam 1e-4, batch 16, seed 1,
    224 px inputs (299 px for the inception backbone)."""
    resize = 299 if model_id == "inceptionv3" else 224
    return TrainingConfig(input_resize=resize)


# The centroid rule has no optimizer; learning_rate/batch_size keep the shared
# config contract satisfied and input_resize records the feature grid side.
BASELINE_TRAINING_CONFIG = TrainingConfig(
    epochs=1,
    optimizer_name="nearest-centroid",
    learning_rate=1.0,
    batch_size=1,
    train_seed=1,
    input_resize=_FEATURE_SIDE,
)

RunStatus = Literal["pending", "completed", "excluded", "failed"]


@dataclass
class RunManifest:
    model_id: str
    dataset_type: str
    seed: int
    training_config: TrainingConfig = field(default_factory=TrainingConfig)
    status: RunStatus = "pending"
    exclusion_reason: str | None = None

    def __post_init__(self) -> None:
        if self.status == "excluded" and not self.exclusion_reason:
            raise ValidationError("an excluded run must carry a reason")

    @property
    def run_id(self) -> str:
        return f"{self.model_id}__{self.dataset_type}__{self.seed}"

    def to_json(self) -> dict:
        doc = {
            "model_id": self.model_id,
            "dataset_type": self.dataset_type,
            "seed": self.seed,
            "training_config": self.training_config.to_json(),
            "status": self.status,
        }
        if self.exclusion_reason is not None:
            doc["exclusion_reason"] = self.exclusion_reason
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RunManifest":
        return cls(
            model_id=doc["model_id"],
            dataset_type=doc["dataset_type"],
            seed=doc["seed"],
            training_config=TrainingConfig.from_json(doc["training_config"]),
            status=doc.get("status", "pending"),
            exclusion_reason=doc.get("exclusion_reason"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    true_class: int | None
    raw_scores: tuple[float, ...]
    predicted_class: int

    def __post_init__(self) -> None:
        scores = tuple(float(s) for s in self.raw_scores)
        object.__setattr__(self, "raw_scores", scores)
        if not scores:
            raise ValidationError(f"record {self.sample_id!r}: empty raw_scores")
        if not all(math.isfinite(s) for s in scores):
            raise ValidationError(f"record {self.sample_id!r}: non-finite raw score")
        expected = int(np.argmax(scores)) + 1
        if self.predicted_class != expected:
            raise ValidationError(
                f"record {self.sample_id!r}: predicted_class {self.predicted_class} "
                f"is not the argmax (class {expected})"
            )

    @classmethod
    def from_scores(
        cls, sample_id: str, raw_scores: Sequence[float], true_class: int | None
    ) -> "PredictionRecord":
        scores = tuple(float(s) for s in raw_scores)
        return cls(
            sample_id=sample_id,
            true_class=true_class,
            raw_scores=scores,
            predicted_class=int(np.argmax(scores)) + 1,
        )


@dataclass(frozen=True)
class LossCurve:
    run_id: str
    losses: tuple[float, ...]

    def __post_init__(self) -> None:
        losses = tuple(float(v) for v in self.losses)
        object.__setattr__(self, "losses", losses)
        if any(not math.isfinite(v) or v < 0 for v in losses):
            raise ValidationError(f"loss curve {self.run_id!r}: losses must be finite and >= 0")


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def softmax(raw_scores: Sequence[float]) -> np.ndarray:
    """exp(r_i) / sum_j exp(r_j), computed with max-subtraction."""
    arr = np.asarray(raw_scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ValidationError("raw_scores must be a non-empty vector")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("raw_scores must be finite")
    shifted = np.exp(arr - arr.max())
    return shifted / shifted.sum()


def top_class(raw_scores: Sequence[float]) -> tuple[int, float]:
    """(1-indexed argmax class, its softmax score); ties break to the lowest index."""
    probs = softmax(raw_scores)
    idx = int(np.argmax(np.asarray(raw_scores, dtype=np.float64)))
    return idx + 1, float(probs[idx])


# ---------------------------------------------------------------------------
# Built-in baseline: nearest class centroid over box-averaged 16x16 features
# ---------------------------------------------------------------------------

def tile_features(tiles: Sequence[TileSample]) -> np.ndarray:
    """Box-average each square tile down to 16x16 and flatten to a 256-vector.

    Tiles smaller than 16 px are first integer-upsampled (pixel repetition)
    so every averaging bin is non-empty; bin edges are (k * side) // 16.
    """
    if not tiles:
        return np.empty((0, _FEATURE_SIDE * _FEATURE_SIDE))
    side = tiles[0].pixels.shape[0]
    arr = np.stack([t.pixels for t in tiles]).astype(np.float64)
    if side < _FEATURE_SIDE:
        rep = -(-_FEATURE_SIDE // side)
        arr = arr.repeat(rep, axis=1).repeat(rep, axis=2)
        side *= rep
    bounds = (np.arange(_FEATURE_SIDE + 1) * side) // _FEATURE_SIDE
    sums = np.add.reduceat(arr, bounds[:-1], axis=1)
    sums = np.add.reduceat(sums, bounds[:-1], axis=2)
    areas = np.outer(np.diff(bounds), np.diff(bounds))
    return (sums / areas).reshape(len(tiles), -1)


class CentroidClassifier:
    """Nearest class-centroid by Euclidean distance in the 256-d feature space.

    Raw scores are negated distances, so softmax and top_class apply to this
    backend exactly as to any other.
    """

    def __init__(self, n_classes: int) -> None:
        self.n_classes = n_classes
        self.centroids: np.ndarray | None = None

    def fit(self, train: Sequence[TileSample]) -> "CentroidClassifier":
        feats = tile_features(train)
        labels = np.array([t.true_class for t in train])
        centroids = np.zeros((self.n_classes, feats.shape[1]))
        for label in range(1, self.n_classes + 1):
            mask = labels == label
            if not mask.any():
                raise ValidationError(f"class {label}: empty train partition")
            centroids[label - 1] = feats[mask].mean(axis=0)
        self.centroids = centroids
        return self

    def raw_scores(self, tiles: Sequence[TileSample]) -> np.ndarray:
        if self.centroids is None:
            raise ValidationError("classifier is not fitted")
        feats = tile_features(tiles)
        sq = (
            np.sum(feats**2, axis=1)[:, None]
            - 2.0 * feats @ self.centroids.T
            + np.sum(self.centroids**2, axis=1)[None, :]
        )
        return -np.sqrt(np.maximum(sq, 0.0))

    def predict(self, tiles: Sequence[TileSample]) -> list[PredictionRecord]:
        scores = self.raw_scores(tiles)
        return [
            PredictionRecord.from_scores(t.sample_id, scores[i], t.true_class)
            for i, t in enumerate(tiles)
        ]


def run_baseline(
    dataset: TileDataset, manifest: RunManifest
) -> tuple[list[PredictionRecord], LossCurve]:
    """Fit the centroid baseline on the train partition and score the test tiles.

    The loss curve is synthetic: a single epoch holding the train
    misclassification rate (the rule has no iterative training).
    """
    if manifest.model_id != BASELINE_MODEL_ID:
        raise ValidationError(
            f"run_baseline expects model_id {BASELINE_MODEL_ID!r}, got {manifest.model_id!r}"
        )
    clf = CentroidClassifier(dataset.spec.n_classes).fit(dataset.train)
    train_records = clf.predict(dataset.train)
    train_error = float(
        np.mean([r.predicted_class != r.true_class for r in train_records])
    )
    records = clf.predict(dataset.test)
    return records, LossCurve(manifest.run_id, (train_error,))


def score_tiles_baseline(
    dataset: TileDataset, tiles: Sequence[TileSample]
) -> list[PredictionRecord]:
    """Refit the (deterministic, cheap) baseline and score arbitrary tiles."""
    clf = CentroidClassifier(dataset.spec.n_classes).fit(dataset.train)
    return clf.predict(tiles)


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------

CONVERGED: Literal["converged"] = "converged"
NOT_CONVERGED: Literal["not_converged"] = "not_converged"


def assess_convergence(curve: LossCurve) -> str:
    """Converged iff mean(last 5 epochs) <= max(0.05, 0.05 * mean(first 5)).

    Requires at least 10 recorded epochs; shorter curves (the baseline's
    synthetic single epoch) are not assessable and are left unexcluded by
    the orchestrator.
    """
    if len(curve.losses) < 10:
        raise ValidationError("convergence assessment needs >= 10 epochs")
    head = float(np.mean(curve.losses[:5]))
    tail = float(np.mean(curve.losses[-5:]))
    return CONVERGED if tail <= max(0.05, 0.05 * head) else NOT_CONVERGED


# ---------------------------------------------------------------------------
# Predictions file I/O + validation
# ---------------------------------------------------------------------------

def write_predictions(path: str | Path, records: Iterable[PredictionRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "sample_id": r.sample_id,
                        "true_class": r.true_class,
                        "raw_scores": list(r.raw_scores),
                        "predicted_class": r.predicted_class,
                    }
                )
                + "\n"
            )


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    """Parse a JSON Lines predictions file, re-validating every record invariant."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            for key in ("sample_id", "raw_scores", "predicted_class"):
                if key not in doc:
                    raise ValidationError(f"{path}:{lineno}: missing {key!r}")
            records.append(
                PredictionRecord(
                    sample_id=doc["sample_id"],
                    true_class=doc.get("true_class"),
                    raw_scores=tuple(doc["raw_scores"]),
                    predicted_class=doc["predicted_class"],
                )
            )
    return records


def validate_predictions(
    records: Sequence[PredictionRecord],
    expected_labels: dict[str, int | None],
    n_classes: int,
) -> None:
    """Cross-check a prediction set against the dataset it claims to cover.

    Every expected sample must appear exactly once, score vectors must have
    one entry per class, and echoed labels must match the dataset's.
    """
    seen: set[str] = set()
    for r in records:
        if r.sample_id in seen:
            raise ValidationError(f"duplicate prediction for sample {r.sample_id!r}")
        seen.add(r.sample_id)
        if r.sample_id not in expected_labels:
            raise ValidationError(f"prediction for unknown sample {r.sample_id!r}")
        if len(r.raw_scores) != n_classes:
            raise ValidationError(
                f"sample {r.sample_id!r}: {len(r.raw_scores)} raw scores for "
                f"{n_classes} classes"
            )
        expected = expected_labels[r.sample_id]
        if expected is not None and r.true_class != expected:
            raise ValidationError(
                f"sample {r.sample_id!r}: echoed true_class {r.true_class} != {expected}"
            )
    missing = set(expected_labels) - seen
    if missing:
        raise ValidationError(
            f"{len(missing)} sample(s) missing from predictions, e.g. {sorted(missing)[0]!r}"
        )


def accuracy(records: Sequence[PredictionRecord]) -> float:
    labeled = [r for r in records if r.true_class is not None]
    if not labeled:
        raise ValidationError("no labeled records to score")
    return float(np.mean([r.predicted_class == r.true_class for r in labeled]))


# ---------------------------------------------------------------------------
# External backend invocation (subprocess over files)
# ---------------------------------------------------------------------------

def _dataset_manifest_labels(manifest_path: Path) -> tuple[dict[str, int | None], int]:
    doc = json.loads(manifest_path.read_text())
    labels = {
        row["sample_id"]: row["true_class"]
        for row in doc["samples"]
        if row["partition"] == "test"
    }
    return labels, int(doc["spec"]["n_classes"])


def invoke_external_backend(
    dataset_manifest: str | Path,
    run_manifest_path: str | Path,
    output_dir: str | Path,
    *,
    command: str,
    external_sets: Sequence[str | Path] = (),
    timeout: float | None = 3600.0,
) -> RunManifest:
    """Launch a conforming backend subprocess and validate what it wrote.

    The backend is invoked as `<command> train --job <job.json>` where the
    job file names the dataset manifest, the run manifest, the output
    directory, and any external tile-set manifests.  On success the run
    manifest is marked completed and rewritten into the output directory.
    """
    dataset_manifest = Path(dataset_manifest).resolve()
    run_manifest_path = Path(run_manifest_path).resolve()
    output_dir = Path(output_dir).resolve()
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.load(run_manifest_path)

    job = {
        "dataset_manifest": str(dataset_manifest),
        "run_manifest": str(run_manifest_path),
        "output_dir": str(output_dir),
        "external_sets": [str(Path(p).resolve()) for p in external_sets],
    }
    job_path = output_dir / "job.json"
    job_path.write_text(json.dumps(job, indent=2) + "\n")

    argv = shlex.split(command) + ["train", "--job", str(job_path)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except FileNotFoundError as exc:
        raise BackendError(f"backend command not found: {argv[0]!r}") from exc
    except subprocess.TimeoutExpired as exc:
        raise BackendError(f"backend timed out after {timeout}s") from exc
    if proc.returncode != 0:
        tail = (proc.stderr or proc.stdout or "").strip().splitlines()[-5:]
        raise BackendError(
            f"backend exited with {proc.returncode}: {' | '.join(tail) or 'no output'}"
        )

    predictions_path = output_dir / "predictions.jsonl"
    curve_path = output_dir / "loss_curve.json"
    for required in (predictions_path, curve_path):
        if not required.exists():
            raise BackendError(f"backend did not write {required.name}")

    expected, n_classes = _dataset_manifest_labels(dataset_manifest)
    records = read_predictions(predictions_path)
    validate_predictions(records, expected, n_classes)

    try:
        losses = json.loads(curve_path.read_text())
    except json.JSONDecodeError as exc:
        raise BackendError(f"loss curve is not valid JSON: {exc}") from exc
    if not isinstance(losses, list) or not losses:
        raise BackendError("loss curve must be a non-empty JSON array")
    curve = LossCurve(manifest.run_id, tuple(losses))
    if len(curve.losses) != manifest.training_config.epochs:
        raise BackendError(
            f"loss curve has {len(curve.losses)} entries for "
            f"{manifest.training_config.epochs} configured epochs"
        )

    for ext_path in external_sets:
        ext = load_external_set(ext_path)
        out_path = output_dir / f"external_{ext.set_id}.jsonl"
        if not out_path.exists():
            raise BackendError(f"backend did not write {out_path.name}")
        ext_records = read_predictions(out_path)
        validate_predictions(
            ext_records, {t.sample_id: None for t in ext.tiles}, n_classes
        )

    completed = replace(manifest, status="completed")
    completed.save(output_dir / "run_manifest.json")
    return completed


def write_loss_curve(path: str | Path, curve: LossCurve) -> None:
    Path(path).write_text(json.dumps(list(curve.losses)) + "\n")


def read_loss_curve(path: str | Path, run_id: str) -> LossCurve:
    losses = json.loads(Path(path).read_text())
    if not isinstance(losses, list):
        raise ValidationError(f"{path}: loss curve must be a JSON array")
    return LossCurve(run_id, tuple(losses))
