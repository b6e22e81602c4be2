"""End-to-end experiment orchestration and the on-disk ledger.

Everything lives in plain files under one output root:

    datasets/<type>-s<seed>/manifest.json (+ tiles/, external_<set>.json)
    runs/<model>__<type>__<seed>/predictions.jsonl, loss_curve.json, ...
    analysis/<model>_<n>c_{confusion,similarity}.{json,csv}
    attribution/<set>/{verdicts.json,vote.json,scores_<run>.csv}
    ledger.json, events.jsonl

A failing run is recorded and skipped; the experiment carries on over the
remaining runs.  Ledger digests hash only deterministic content (no
timestamps), so rerunning an identical config reproduces them byte for
byte.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .annotations import ClassScheme, extract_piece, load_annotations
from .augment import AugmentationParams
from .datasets import (
    DATASET_FAMILIES,
    DatasetSpec,
    ExternalTileSet,
    TileDataset,
    build_dataset,
    build_external_set,
    load_external_set,
    save_dataset,
    save_external_set,
)
from .errors import BackendError, ValidationError
from .harness import (
    BASELINE_MODEL_ID,
    BASELINE_TRAINING_CONFIG,
    DEFAULT_SEEDS,
    LossCurve,
    RunManifest,
    TrainingConfig,
    accuracy,
    assess_convergence,
    invoke_external_backend,
    read_loss_curve,
    read_predictions,
    run_baseline,
    score_tiles_baseline,
    write_loss_curve,
    write_predictions,
)
from .similarity import (
    RelationThresholds,
    confusion_matrix,
    similarity_report,
    sum_matrices,
    write_confusion_csv,
    write_similarity_csv,
)
from .voting import majority_vote, run_verdict, score_external, write_score_table, write_verdict_file


@dataclass(frozen=True)
class BackendSpec:
    model_id: str
    kind: str  # "baseline" | "exec"
    command: str | None = None
    training_config: TrainingConfig | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("baseline", "exec"):
            raise ValidationError(f"backend kind must be baseline or exec, got {self.kind!r}")
        if self.kind == "exec" and not self.command:
            raise ValidationError(f"exec backend {self.model_id!r} needs a command")

    def resolved_training_config(self) -> TrainingConfig:
        if self.training_config is not None:
            return self.training_config
        if self.kind == "baseline":
            return BASELINE_TRAINING_CONFIG
        return TrainingConfig()

    def to_json(self) -> dict:
        doc: dict = {"model_id": self.model_id, "kind": self.kind}
        if self.command:
            doc["command"] = self.command
        if self.training_config is not None:
            doc["training_config"] = self.training_config.to_json()
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "BackendSpec":
        return cls(
            model_id=doc["model_id"],
            kind=doc["kind"],
            command=doc.get("command"),
            training_config=(
                TrainingConfig.from_json(doc["training_config"])
                if "training_config" in doc
                else None
            ),
        )


@dataclass(frozen=True)
class ExternalSetSpec:
    set_id: str
    annotations: str

    def to_json(self) -> dict:
        return {"set_id": self.set_id, "annotations": self.annotations}


@dataclass(eq=False)
class ExperimentConfig:
    annotations: str
    dataset_types: list[str]
    backends: list[BackendSpec]
    out_root: str
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    split_ratio: float = 0.8
    augmentation: AugmentationParams = field(default_factory=AugmentationParams)
    external_sets: list[ExternalSetSpec] = field(default_factory=list)
    thresholds: RelationThresholds = field(default_factory=RelationThresholds)
    exclusion_policy: str = "exclude"  # "exclude" | "include"
    tally_mode: str = "per-run"
    storage: str = "png"
    parallelism: int = 1
    backend_timeout: float | None = 3600.0

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValidationError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be distinct")
        if not self.backends:
            raise ValidationError("at least one backend is required")
        if len({b.model_id for b in self.backends}) != len(self.backends):
            raise ValidationError("backend model_ids must be distinct")
        if not self.dataset_types:
            raise ValidationError("at least one dataset type is required")
        if len(set(self.dataset_types)) != len(self.dataset_types):
            raise ValidationError("dataset types must be distinct")
        for dtype in self.dataset_types:
            if dtype not in DATASET_FAMILIES:
                raise ValidationError(f"unknown dataset type {dtype!r}")
        if self.exclusion_policy not in ("exclude", "include"):
            raise ValidationError("exclusion_policy must be exclude or include")
        if self.tally_mode not in ("per-run", "per-tile"):
            raise ValidationError("tally_mode must be per-run or per-tile")
        if self.parallelism < 1:
            raise ValidationError("parallelism must be >= 1")

    def to_json(self) -> dict:
        return {
            "annotations": self.annotations,
            "dataset_types": list(self.dataset_types),
            "backends": [b.to_json() for b in self.backends],
            "out_root": self.out_root,
            "seeds": list(self.seeds),
            "split_ratio": self.split_ratio,
            "augmentation": self.augmentation.to_json(),
            "external_sets": [e.to_json() for e in self.external_sets],
            "thresholds": self.thresholds.to_json(),
            "exclusion_policy": self.exclusion_policy,
            "tally_mode": self.tally_mode,
            "storage": self.storage,
            "parallelism": self.parallelism,
        }

    @classmethod
    def from_json(cls, doc: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        def _resolve(p: str) -> str:
            path = Path(p)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return str(path)

        return cls(
            annotations=_resolve(doc["annotations"]),
            dataset_types=list(doc["dataset_types"]),
            backends=[BackendSpec.from_json(b) for b in doc["backends"]],
            out_root=_resolve(doc["out_root"]),
            seeds=list(doc.get("seeds", DEFAULT_SEEDS)),
            split_ratio=doc.get("split_ratio", 0.8),
            augmentation=(
                AugmentationParams.from_json(doc["augmentation"])
                if "augmentation" in doc
                else AugmentationParams()
            ),
            external_sets=[
                ExternalSetSpec(e["set_id"], _resolve(e["annotations"]))
                for e in doc.get("external_sets", [])
            ],
            thresholds=(
                RelationThresholds.from_json(doc["thresholds"])
                if "thresholds" in doc
                else RelationThresholds()
            ),
            exclusion_policy=doc.get("exclusion_policy", "exclude"),
            tally_mode=doc.get("tally_mode", "per-run"),
            storage=doc.get("storage", "png"),
            parallelism=doc.get("parallelism", 1),
            backend_timeout=doc.get("backend_timeout", 3600.0),
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_json(json.loads(path.read_text()), base_dir=path.parent)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass(eq=False)
class ExperimentLedger:
    config: dict
    datasets: dict
    runs: list[dict]
    analysis: dict
    attribution: dict
    digests: dict

    def to_json(self) -> dict:
        return {
            "format": "writerid-ledger/1",
            "config": self.config,
            "datasets": self.datasets,
            "runs": self.runs,
            "analysis": self.analysis,
            "attribution": self.attribution,
            "digests": self.digests,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentLedger":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "writerid-ledger/1":
            raise ValidationError(f"{path}: not an experiment ledger")
        return cls(
            config=doc["config"],
            datasets=doc["datasets"],
            runs=doc["runs"],
            analysis=doc["analysis"],
            attribution=doc["attribution"],
            digests=doc["digests"],
        )


class _EventLog:
    """Append-only JSONL event stream; the single serialized ledger writer."""

    def __init__(self, path: Path) -> None:
        self._path = path
        self._seq = 0
        path.write_text("")

    def emit(self, event: str, **fields) -> None:
        self._seq += 1
        record = {"seq": self._seq, "event": event, **fields}
        with open(self._path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _dataset_key(dtype: str, seed: int) -> str:
    return f"{dtype}-s{seed}"


def _scheme_for(schemes: dict[str, ClassScheme], n_classes: int) -> ClassScheme:
    matches = [s for s in schemes.values() if s.n_classes == n_classes]
    if not matches:
        raise ValidationError(f"annotation file declares no {n_classes}-class scheme")
    if len(matches) > 1:
        raise ValidationError(
            f"annotation file declares several {n_classes}-class schemes; "
            "keep one per class count"
        )
    return matches[0]


def _run_one(
    backend: BackendSpec,
    dataset: TileDataset,
    dataset_dir: Path,
    run_dir: Path,
    external_sets: dict[str, ExternalTileSet],
    external_paths: dict[str, Path],
    timeout: float | None,
) -> tuple[RunManifest, dict]:
    """Execute a single (backend, dataset) run; returns (manifest, metrics)."""
    manifest = RunManifest(
        model_id=backend.model_id,
        dataset_type=dataset.spec.dataset_type,
        seed=dataset.spec.seed,
        training_config=backend.resolved_training_config(),
    )
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "run_manifest.json"
    manifest.save(manifest_path)

    if backend.kind == "baseline":
        job = {
            "dataset_manifest": str((dataset_dir / "manifest.json").resolve()),
            "run_manifest": str(manifest_path.resolve()),
            "output_dir": str(run_dir.resolve()),
            "external_sets": [str(external_paths[s].resolve()) for s in sorted(external_sets)],
        }
        (run_dir / "job.json").write_text(json.dumps(job, indent=2) + "\n")
        records, curve = run_baseline(dataset, manifest)
        write_predictions(run_dir / "predictions.jsonl", records)
        write_loss_curve(run_dir / "loss_curve.json", curve)
        for set_id, ext in external_sets.items():
            ext_records = score_tiles_baseline(dataset, ext.tiles)
            write_predictions(run_dir / f"external_{set_id}.jsonl", ext_records)
        manifest = replace(manifest, status="completed")
        manifest.save(manifest_path)
    else:
        manifest = invoke_external_backend(
            dataset_dir / "manifest.json",
            manifest_path,
            run_dir,
            command=backend.command,
            external_sets=[external_paths[set_id] for set_id in sorted(external_sets)],
            timeout=timeout,
        )
        records = read_predictions(run_dir / "predictions.jsonl")
        curve = read_loss_curve(run_dir / "loss_curve.json", manifest.run_id)

    metrics = {
        "test_accuracy": round(accuracy(records), 6),
        "final_loss": curve.losses[-1],
        "n_epochs": len(curve.losses),
    }
    return manifest, metrics


def run_experiment(config: ExperimentConfig) -> ExperimentLedger:
    out_root = Path(config.out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    events = _EventLog(out_root / "events.jsonl")
    config_json = config.to_json()
    (out_root / "config.json").write_text(json.dumps(config_json, indent=2, sort_keys=True) + "\n")
    events.emit("experiment_started")

    aset = load_annotations(config.annotations)
    needed_classes = sorted({DATASET_FAMILIES[t][2] for t in config.dataset_types})
    pieces_by_n = {}
    schemes_by_n = {}
    for n in needed_classes:
        scheme = _scheme_for(aset.schemes, n)
        schemes_by_n[n] = scheme
        pieces = [
            extract_piece(aset.sources[r.source_id], r)
            for r in aset.regions
            if r.scheme_id == scheme.scheme_id and r.class_label is not None
        ]
        if not pieces:
            raise ValidationError(f"no labeled regions for scheme {scheme.scheme_id!r}")
        pieces_by_n[n] = pieces

    external_pieces: dict[str, list] = {}
    for ext_spec in config.external_sets:
        ext_aset = load_annotations(ext_spec.annotations, allow_unlabeled=True)
        external_pieces[ext_spec.set_id] = [
            extract_piece(ext_aset.sources[r.source_id], r) for r in ext_aset.regions
        ]

    # Build every (dataset_type, seed) dataset once; backends share them.
    datasets: dict[str, TileDataset] = {}
    dataset_dirs: dict[str, Path] = {}
    dataset_meta: dict[str, dict] = {}
    ext_tiles: dict[str, dict[str, ExternalTileSet]] = {}
    ext_paths: dict[str, dict[str, Path]] = {}
    for dtype in config.dataset_types:
        n = DATASET_FAMILIES[dtype][2]
        for seed in config.seeds:
            key = _dataset_key(dtype, seed)
            spec = DatasetSpec.from_type(
                dtype,
                schemes_by_n[n].scheme_id,
                seed,
                split_ratio=config.split_ratio,
                augmentation=config.augmentation,
            )
            ds = build_dataset(pieces_by_n[n], spec)
            ds_dir = out_root / "datasets" / key
            manifest_path = save_dataset(ds, ds_dir, storage=config.storage)
            datasets[key] = ds
            dataset_dirs[key] = ds_dir
            dataset_meta[key] = {
                "manifest": str(manifest_path.relative_to(out_root)),
                "tile_size": ds.tile_size,
                "n_samples": ds.n_samples,
                "counts": {
                    part: {str(k): v for k, v in ds.counts[part].items()}
                    for part in ("train", "test")
                },
            }
            ext_tiles[key] = {}
            ext_paths[key] = {}
            for ext_spec in config.external_sets:
                ext = build_external_set(
                    external_pieces[ext_spec.set_id], ext_spec.set_id, ds.tile_size, spec.stride_px
                )
                path = save_external_set(
                    ext, ds_dir / f"external_{ext_spec.set_id}.json", storage=config.storage
                )
                ext_tiles[key][ext_spec.set_id] = ext
                ext_paths[key][ext_spec.set_id] = path
            events.emit("dataset_built", dataset=key, n_samples=ds.n_samples, tile_size=ds.tile_size)

    # Execute runs (optionally in parallel); collect results keyed by run id.
    jobs = []
    for backend in config.backends:
        for dtype in config.dataset_types:
            for seed in config.seeds:
                key = _dataset_key(dtype, seed)
                run_id = f"{backend.model_id}__{dtype}__{seed}"
                jobs.append((run_id, backend, key))

    results: dict[str, dict] = {}

    def _execute(job):
        run_id, backend, key = job
        run_dir = out_root / "runs" / run_id
        try:
            manifest, metrics = _run_one(
                backend,
                datasets[key],
                dataset_dirs[key],
                run_dir,
                ext_tiles[key],
                ext_paths[key],
                config.backend_timeout,
            )
            return run_id, manifest, metrics, None
        except (ValidationError, BackendError, OSError) as exc:
            return run_id, None, None, f"{type(exc).__name__}: {exc}"

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            outcomes = list(pool.map(_execute, jobs))
    else:
        outcomes = [_execute(job) for job in jobs]

    run_records: list[dict] = []
    manifests: dict[str, RunManifest] = {}
    for (run_id, backend, key), (rid, manifest, metrics, error) in zip(jobs, outcomes):
        run_dir = out_root / "runs" / run_id
        if error is not None:
            failed = RunManifest(
                model_id=backend.model_id,
                dataset_type=datasets[key].spec.dataset_type,
                seed=datasets[key].spec.seed,
                training_config=backend.resolved_training_config(),
                status="failed",
            )
            run_dir.mkdir(parents=True, exist_ok=True)
            failed.save(run_dir / "run_manifest.json")
            run_records.append(
                {
                    "run_id": run_id,
                    "model_id": backend.model_id,
                    "dataset_type": failed.dataset_type,
                    "seed": failed.seed,
                    "dataset": key,
                    "status": "failed",
                    "error": error,
                    "artifacts": {"run_dir": str(run_dir.relative_to(out_root))},
                }
            )
            events.emit("run_failed", run=run_id, error=error)
            continue
        manifests[run_id] = manifest
        record = {
            "run_id": run_id,
            "model_id": manifest.model_id,
            "dataset_type": manifest.dataset_type,
            "seed": manifest.seed,
            "dataset": key,
            "status": manifest.status,
            "metrics": metrics,
            "artifacts": {
                "run_dir": str(run_dir.relative_to(out_root)),
                "predictions": str((run_dir / "predictions.jsonl").relative_to(out_root)),
                "loss_curve": str((run_dir / "loss_curve.json").relative_to(out_root)),
            },
        }
        for set_id in sorted(ext_tiles[key]):
            record["artifacts"][f"external_{set_id}"] = str(
                (run_dir / f"external_{set_id}.jsonl").relative_to(out_root)
            )
        run_records.append(record)
        events.emit("run_completed", run=run_id, accuracy=metrics["test_accuracy"])

    # Convergence exclusion: only assessable (>= 10 epoch) curves are judged.
    for record in run_records:
        if record["status"] != "completed":
            continue
        run_id = record["run_id"]
        curve = read_loss_curve(
            out_root / record["artifacts"]["loss_curve"], run_id
        )
        if len(curve.losses) < 10:
            record["convergence"] = "not_assessed"
            continue
        verdict = assess_convergence(curve)
        record["convergence"] = verdict
        if verdict == "not_converged" and config.exclusion_policy == "exclude":
            reason = (
                "loss curve failed the convergence thresholds "
                "(mean of last 5 epochs above max(0.05, 5% of first-5 mean))"
            )
            manifest = replace(manifests[run_id], status="excluded", exclusion_reason=reason)
            manifests[run_id] = manifest
            manifest.save(out_root / record["artifacts"]["run_dir"] / "run_manifest.json")
            record["status"] = "excluded"
            record["exclusion_reason"] = reason
            events.emit("run_excluded", run=run_id)

    active = [r for r in run_records if r["status"] == "completed"]

    # Per-model summed confusion matrices and similarity reports.
    analysis_dir = out_root / "analysis"
    analysis_dir.mkdir(exist_ok=True)
    analysis: dict[str, dict] = {}
    for backend in config.backends:
        for n in needed_classes:
            group = [
                r
                for r in active
                if r["model_id"] == backend.model_id
                and DATASET_FAMILIES[r["dataset_type"]][2] == n
            ]
            if not group:
                continue
            per_run = []
            for r in group:
                records = read_predictions(out_root / r["artifacts"]["predictions"])
                matrix = confusion_matrix(records, n, [r["run_id"]])
                run_dir = out_root / r["artifacts"]["run_dir"]
                (run_dir / "confusion.json").write_text(
                    json.dumps(matrix.to_json(), indent=1) + "\n"
                )
                write_confusion_csv(run_dir / "confusion.csv", matrix)
                r["artifacts"]["confusion"] = str(
                    (run_dir / "confusion.json").relative_to(out_root)
                )
                per_run.append(matrix)
            summed = sum_matrices(per_run)
            report = similarity_report(summed, backend.model_id, config.thresholds)
            stem = f"{backend.model_id}_{n}c"
            (analysis_dir / f"{stem}_confusion.json").write_text(
                json.dumps(summed.to_json(), indent=1) + "\n"
            )
            write_confusion_csv(analysis_dir / f"{stem}_confusion.csv", summed)
            report.save(analysis_dir / f"{stem}_similarity.json")
            write_similarity_csv(analysis_dir / f"{stem}_similarity.csv", report)
            analysis[stem] = {
                "model_id": backend.model_id,
                "n_classes": n,
                "runs": [r["run_id"] for r in group],
                "confusion": str((analysis_dir / f"{stem}_confusion.json").relative_to(out_root)),
                "confusion_csv": str((analysis_dir / f"{stem}_confusion.csv").relative_to(out_root)),
                "similarity": str((analysis_dir / f"{stem}_similarity.json").relative_to(out_root)),
                "summary": {
                    "pairs": {f"({i},{j})": v for (i, j), v in sorted(report.pairs.items())},
                    "relations": [rel.to_json() for rel in report.relations],
                },
            }
            events.emit("analysis_written", group=stem)

    # Attribution of external sets + the 2-step vote.
    attribution: dict[str, dict] = {}
    for ext_spec in config.external_sets:
        set_id = ext_spec.set_id
        set_dir = out_root / "attribution" / set_id
        set_dir.mkdir(parents=True, exist_ok=True)
        verdicts = []
        for r in active:
            run_id = r["run_id"]
            key = r["dataset"]
            ext = ext_tiles[key][set_id]
            n = DATASET_FAMILIES[r["dataset_type"]][2]
            scheme = schemes_by_n[n]
            ext_records = read_predictions(out_root / r["artifacts"][f"external_{set_id}"])
            scores = score_external(ext, ext_records, scheme)
            write_score_table(set_dir / f"scores_{run_id}.csv", scores, scheme.n_classes)
            verdicts.append(run_verdict(manifests[run_id], [s.author for s in scores]))
        if not verdicts:
            continue
        tally = majority_vote(verdicts, config.tally_mode)
        write_verdict_file(set_dir / "verdicts.json", set_id, verdicts, tally)
        (set_dir / "vote.json").write_text(json.dumps(tally.to_json(), indent=2, sort_keys=True) + "\n")
        attribution[set_id] = {
            "verdicts": str((set_dir / "verdicts.json").relative_to(out_root)),
            "vote": str((set_dir / "vote.json").relative_to(out_root)),
            "final": tally.final,
            "step1": tally.to_json()["step1"],
        }
        events.emit("attribution_written", set=set_id, final=tally.final)

    run_records.sort(key=lambda r: r["run_id"])
    digests = {
        "config": digest(config_json),
        "datasets": digest(dataset_meta),
        "runs": digest(run_records),
        "analysis": digest(analysis),
        "attribution": digest(attribution),
    }
    digests["overall"] = digest(digests)
    ledger = ExperimentLedger(
        config=config_json,
        datasets=dataset_meta,
        runs=run_records,
        analysis=analysis,
        attribution=attribution,
        digests=digests,
    )
    ledger.save(out_root / "ledger.json")
    events.emit("experiment_finished", overall=digests["overall"])
    return ledger


def experiment_exit_code(ledger: ExperimentLedger) -> int:
    """0 all runs completed, 2 some failed, 3 all failed (excluded runs count as completed work)."""
    statuses = [r["status"] for r in ledger.runs]
    failed = sum(1 for s in statuses if s == "failed")
    if failed == 0:
        return 0
    if failed == len(statuses):
        return 3
    return 2
