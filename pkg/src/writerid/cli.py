"""Command-line interface.

Subcommands mirror the pipeline stages: build-dataset, run, analyze,
attribute, vote, experiment, report.  Exit codes: 0 success, 1 validation
error, 2 partial failure (some runs failed), 3 total failure.
"""

from __future__ import annotations

import argparse
import glob as globlib
import json
import sys
from pathlib import Path

from .annotations import ClassScheme, extract_piece, load_annotations
from .augment import AugmentationParams
from .datasets import (
    DATASET_FAMILIES,
    DatasetSpec,
    build_dataset,
    build_external_set,
    load_dataset,
    load_external_set,
    save_dataset,
)
from .errors import AnnotationParseError, BackendError, ValidationError
from .experiment import (
    ExperimentConfig,
    ExperimentLedger,
    experiment_exit_code,
    run_experiment,
)
from .harness import (
    BASELINE_MODEL_ID,
    RunManifest,
    accuracy,
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
from .voting import majority_vote, read_verdict_file, run_verdict, score_external, write_score_table, write_verdict_file

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PARTIAL = 2
EXIT_TOTAL = 3


def _load_aug_params(arg: str | None) -> AugmentationParams:
    if arg is None:
        return AugmentationParams()
    path = Path(arg)
    text = path.read_text() if path.exists() else arg
    return AugmentationParams.from_json(json.loads(text))


def _cmd_build_dataset(args) -> int:
    aset = load_annotations(args.annotations)
    n_classes = DATASET_FAMILIES[args.type][2]
    if args.scheme:
        scheme = aset.schemes.get(args.scheme)
        if scheme is None:
            raise ValidationError(f"scheme {args.scheme!r} not declared in {args.annotations}")
    else:
        candidates = [s for s in aset.schemes.values() if s.n_classes == n_classes]
        if len(candidates) != 1:
            raise ValidationError(
                f"pass --scheme: {len(candidates)} {n_classes}-class schemes declared"
            )
        scheme = candidates[0]
    if scheme.n_classes != n_classes:
        raise ValidationError(
            f"dataset type {args.type} needs {n_classes} classes; "
            f"scheme {scheme.scheme_id!r} has {scheme.n_classes}"
        )
    pieces = [
        extract_piece(aset.sources[r.source_id], r)
        for r in aset.regions
        if r.scheme_id == scheme.scheme_id and r.class_label is not None
    ]
    spec = DatasetSpec.from_type(
        args.type,
        scheme.scheme_id,
        args.seed,
        split_ratio=args.split_ratio,
        augmentation=_load_aug_params(args.params),
    )
    ds = build_dataset(pieces, spec)
    manifest_path = save_dataset(ds, args.out, storage=args.storage)
    print(f"dataset {args.type} seed {args.seed}: {ds.n_samples} tiles of {ds.tile_size}px")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def _write_job_file(run_dir: Path, dataset_manifest: Path, manifest_path: Path, externals) -> None:
    job = {
        "dataset_manifest": str(dataset_manifest.resolve()),
        "run_manifest": str(manifest_path.resolve()),
        "output_dir": str(run_dir.resolve()),
        "external_sets": [str(Path(p).resolve()) for p in externals],
    }
    (run_dir / "job.json").write_text(json.dumps(job, indent=2) + "\n")


def _cmd_run(args) -> int:
    dataset_path = Path(args.dataset)
    dataset_manifest = dataset_path / "manifest.json" if dataset_path.is_dir() else dataset_path
    manifest = RunManifest.load(args.manifest)
    ds = load_dataset(dataset_manifest)
    if (manifest.dataset_type, manifest.seed) != (ds.spec.dataset_type, ds.spec.seed):
        raise ValidationError(
            f"run manifest names ({manifest.dataset_type}, {manifest.seed}) but the dataset "
            f"is ({ds.spec.dataset_type}, {ds.spec.seed})"
        )
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)

    if args.backend == "baseline":
        if manifest.model_id != BASELINE_MODEL_ID:
            raise ValidationError(
                f"baseline backend runs as model_id {BASELINE_MODEL_ID!r}, "
                f"manifest says {manifest.model_id!r}"
            )
        records, curve = run_baseline(ds, manifest)
        write_predictions(run_dir / "predictions.jsonl", records)
        write_loss_curve(run_dir / "loss_curve.json", curve)
        for ext_path in args.external:
            ext = load_external_set(ext_path)
            ext_records = score_tiles_baseline(ds, ext.tiles)
            write_predictions(run_dir / f"external_{ext.set_id}.jsonl", ext_records)
        from dataclasses import replace

        completed = replace(manifest, status="completed")
        manifest_out = run_dir / "run_manifest.json"
        completed.save(manifest_out)
        _write_job_file(run_dir, dataset_manifest, manifest_out, args.external)
        print(f"run {completed.run_id}: accuracy {accuracy(records):.4f}")
    elif args.backend.startswith("exec:"):
        command = args.backend[len("exec:") :]
        completed = invoke_external_backend(
            dataset_manifest,
            args.manifest,
            run_dir,
            command=command,
            external_sets=args.external,
            timeout=args.timeout,
        )
        records = read_predictions(run_dir / "predictions.jsonl")
        print(f"run {completed.run_id}: accuracy {accuracy(records):.4f}")
    else:
        raise ValidationError("--backend must be 'baseline' or 'exec:<command>'")
    return EXIT_OK


def _iter_run_dirs(pattern: str) -> list[Path]:
    dirs = []
    for match in sorted(globlib.glob(pattern)):
        path = Path(match)
        if (path / "run_manifest.json").exists():
            dirs.append(path)
    if not dirs:
        raise ValidationError(f"no run directories match {pattern!r}")
    return dirs


def _cmd_analyze(args) -> int:
    thresholds = (
        RelationThresholds.from_json(json.loads(Path(args.thresholds).read_text()))
        if args.thresholds
        else RelationThresholds()
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, int], list] = {}
    skipped = []
    for run_dir in _iter_run_dirs(args.runs):
        manifest = RunManifest.load(run_dir / "run_manifest.json")
        if manifest.status != "completed":
            skipped.append((manifest.run_id, manifest.status))
            continue
        n = DATASET_FAMILIES[manifest.dataset_type][2]
        records = read_predictions(run_dir / "predictions.jsonl")
        matrix = confusion_matrix(records, n, [manifest.run_id])
        (run_dir / "confusion.json").write_text(json.dumps(matrix.to_json(), indent=1) + "\n")
        write_confusion_csv(run_dir / "confusion.csv", matrix)
        groups.setdefault((manifest.model_id, n), []).append(matrix)
    for (model_id, n), matrices in sorted(groups.items()):
        summed = sum_matrices(matrices)
        report = similarity_report(summed, model_id, thresholds)
        stem = f"{model_id}_{n}c"
        (out_dir / f"{stem}_confusion.json").write_text(
            json.dumps(summed.to_json(), indent=1) + "\n"
        )
        write_confusion_csv(out_dir / f"{stem}_confusion.csv", summed)
        report.save(out_dir / f"{stem}_similarity.json")
        write_similarity_csv(out_dir / f"{stem}_similarity.csv", report)
        holds = {r.name: r.holds for r in report.relations}
        print(f"{stem}: {len(matrices)} run(s), relations {holds}")
    for run_id, status in skipped:
        print(f"skipped {run_id} (status {status})")
    return EXIT_OK


def _set_ids_from_tiles_arg(tiles_arg: str) -> list[str]:
    path = Path(tiles_arg)
    if path.is_dir():
        manifests = sorted(path.glob("external_*.json"))
        if not manifests:
            raise ValidationError(f"no external_*.json manifests under {path}")
        return [load_external_set(p).set_id for p in manifests]
    if path.exists():
        return [load_external_set(path).set_id]
    return [tiles_arg]  # a bare set id


def _cmd_attribute(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_ids = _set_ids_from_tiles_arg(args.tiles)
    exit_code = EXIT_OK
    for set_id in set_ids:
        verdicts = []
        for run_dir in _iter_run_dirs(args.runs):
            manifest = RunManifest.load(run_dir / "run_manifest.json")
            if manifest.status != "completed":
                continue
            pred_path = run_dir / f"external_{set_id}.jsonl"
            job_path = run_dir / "job.json"
            if not pred_path.exists() or not job_path.exists():
                print(f"skipped {manifest.run_id}: no scored tiles for set {set_id!r}")
                continue
            job = json.loads(job_path.read_text())
            ext_manifest = next(
                (p for p in job.get("external_sets", []) if Path(p).name == f"external_{set_id}.json"),
                None,
            )
            if ext_manifest is None:
                print(f"skipped {manifest.run_id}: job does not list set {set_id!r}")
                continue
            ext = load_external_set(ext_manifest)
            n = DATASET_FAMILIES[manifest.dataset_type][2]
            scheme = ClassScheme(args.scheme, n, None)
            scores = score_external(ext, read_predictions(pred_path), scheme)
            set_dir = out_dir / set_id
            set_dir.mkdir(exist_ok=True)
            write_score_table(set_dir / f"scores_{manifest.run_id}.csv", scores, n)
            verdicts.append(run_verdict(manifest, [s.author for s in scores]))
        if not verdicts:
            print(f"set {set_id!r}: no attributable runs")
            exit_code = EXIT_PARTIAL
            continue
        tally = majority_vote(verdicts, args.tally)
        set_dir = out_dir / set_id
        write_verdict_file(set_dir / "verdicts.json", set_id, verdicts, tally)
        (set_dir / "vote.json").write_text(json.dumps(tally.to_json(), indent=2, sort_keys=True) + "\n")
        print(f"set {set_id!r}: final {tally.final} (step1 {tally.step1})")
    return exit_code


def _cmd_vote(args) -> int:
    set_id, verdicts, _ = read_verdict_file(args.verdicts)
    tally = majority_vote(verdicts, args.tally)
    doc = tally.to_json()
    doc["set_id"] = set_id
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_experiment(args) -> int:
    config = ExperimentConfig.load(args.config)
    ledger = run_experiment(config)
    code = experiment_exit_code(ledger)
    completed = sum(1 for r in ledger.runs if r["status"] == "completed")
    excluded = sum(1 for r in ledger.runs if r["status"] == "excluded")
    failed = sum(1 for r in ledger.runs if r["status"] == "failed")
    print(
        f"experiment finished: {completed} completed, {excluded} excluded, "
        f"{failed} failed; ledger {Path(config.out_root) / 'ledger.json'}"
    )
    for set_id, entry in sorted(ledger.attribution.items()):
        print(f"attribution {set_id!r}: {entry['final']}")
    return code


def _cmd_report(args) -> int:
    from .report import render_report

    ledger_path = Path(args.ledger)
    ledger = ExperimentLedger.load(ledger_path)
    bundle = render_report(ledger, ledger_path.parent, args.out)
    print(
        f"report: {bundle.report_md} ({len(bundle.figures)} figures, "
        f"{len(bundle.tables)} tables)"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="writerid",
        description="Writer-attribution toolkit: datasets, classifier runs, "
        "similarity analytics, and 2-step majority voting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="build one seeded tile dataset")
    p.add_argument("--annotations", required=True)
    p.add_argument("--type", required=True, choices=sorted(DATASET_FAMILIES))
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", default=None, help="scheme id (default: the sole matching one)")
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--params", default=None, help="augmentation params (JSON file or literal)")
    p.add_argument("--storage", choices=("png", "inline"), default="png")
    p.set_defaults(func=_cmd_build_dataset)

    p = sub.add_parser("run", help="execute one classifier run over a dataset")
    p.add_argument("--backend", required=True, help="'baseline' or 'exec:<command>'")
    p.add_argument("--dataset", required=True, help="dataset directory or manifest path")
    p.add_argument("--manifest", required=True, help="run manifest JSON")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--external", action="append", default=[], help="external tile manifest(s)")
    p.add_argument("--timeout", type=float, default=3600.0)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("analyze", help="confusion matrices and similarity reports")
    p.add_argument("--runs", required=True, help="glob of run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", default=None, help="relation thresholds JSON file")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("attribute", help="score held-out tiles and tally per-run verdicts")
    p.add_argument("--tiles", required=True, help="external manifest, its directory, or a set id")
    p.add_argument("--runs", required=True, help="glob of run directories")
    p.add_argument("--scheme", required=True, help="scheme id for the class-author map")
    p.add_argument("--out", required=True)
    p.add_argument("--tally", choices=("per-run", "per-tile"), default="per-run")
    p.set_defaults(func=_cmd_attribute)

    p = sub.add_parser("vote", help="2-step majority vote over a verdicts file")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--tally", choices=("per-run", "per-tile"), default="per-run")
    p.set_defaults(func=_cmd_vote)

    p = sub.add_parser("experiment", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("report", help="render a ledger into markdown, CSV, and figures")
    p.add_argument("--ledger", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (AnnotationParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_TOTAL


if __name__ == "__main__":
    raise SystemExit(main())
