import json
import sys
from pathlib import Path

import pytest

from conftest import LIGHT_PARAMS
from writerid.cli import main
from writerid.harness import BASELINE_MODEL_ID, BASELINE_TRAINING_CONFIG, RunManifest

STUB = f"{sys.executable} {Path(__file__).parent / 'stub_backend.py'}"


@pytest.fixture(scope="module")
def workspace(synth_workspace):
    return synth_workspace


@pytest.fixture(scope="module")
def built_dataset(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    code = main(
        [
            "build-dataset",
            "--annotations",
            str(workspace["annotations"]),
            "--type",
            "v01",
            "--seed",
            "1033",
            "--out",
            str(out),
            "--storage",
            "inline",
            "--params",
            json.dumps(LIGHT_PARAMS.to_json()),
        ]
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def baseline_run(built_dataset, tmp_path_factory, workspace):
    root = tmp_path_factory.mktemp("cli_run")
    manifest = RunManifest(BASELINE_MODEL_ID, "v01", 1033, BASELINE_TRAINING_CONFIG)
    manifest_path = root / "run_manifest.json"
    manifest.save(manifest_path)

    # Build a matching external tile manifest at the dataset's tile size.
    from writerid.annotations import extract_piece, load_annotations
    from writerid.datasets import build_external_set, load_dataset, save_external_set

    ds = load_dataset(built_dataset)
    aset = load_annotations(workspace["external"], allow_unlabeled=True)
    pieces = [extract_piece(aset.sources[r.source_id], r) for r in aset.regions]
    ext = build_external_set(pieces, "held-out", ds.tile_size, ds.spec.stride_px)
    ext_path = built_dataset / "external_held-out.json"
    save_external_set(ext, ext_path, storage="inline")

    run_dir = root / "runs" / "r1"
    code = main(
        [
            "run",
            "--backend",
            "baseline",
            "--dataset",
            str(built_dataset),
            "--manifest",
            str(manifest_path),
            "--out",
            str(run_dir),
            "--external",
            str(ext_path),
        ]
    )
    assert code == 0
    return root


class TestBuildDataset:
    def test_manifest_written(self, built_dataset):
        assert (built_dataset / "manifest.json").exists()

    def test_unknown_annotations_path_is_validation_error(self, tmp_path, capsys):
        code = main(
            [
                "build-dataset",
                "--annotations",
                str(tmp_path / "nope.json"),
                "--type",
                "v01",
                "--seed",
                "1",
                "--out",
                str(tmp_path / "out"),
            ]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestRun:
    def test_outputs_present(self, baseline_run):
        run_dir = baseline_run / "runs" / "r1"
        for name in ("predictions.jsonl", "loss_curve.json", "run_manifest.json", "job.json"):
            assert (run_dir / name).exists()
        assert (run_dir / "external_held-out.jsonl").exists()
        manifest = RunManifest.load(run_dir / "run_manifest.json")
        assert manifest.status == "completed"

    def test_manifest_dataset_mismatch_rejected(self, built_dataset, tmp_path, capsys):
        manifest = RunManifest(BASELINE_MODEL_ID, "v02", 1033, BASELINE_TRAINING_CONFIG)
        manifest_path = tmp_path / "m.json"
        manifest.save(manifest_path)
        code = main(
            [
                "run",
                "--backend",
                "baseline",
                "--dataset",
                str(built_dataset),
                "--manifest",
                str(manifest_path),
                "--out",
                str(tmp_path / "run"),
            ]
        )
        assert code == 1

    def test_exec_backend_failure_is_total(self, built_dataset, tmp_path, capsys):
        manifest = RunManifest("stub-cnn", "v01", 1033, BASELINE_TRAINING_CONFIG)
        manifest_path = tmp_path / "m.json"
        manifest.save(manifest_path)
        code = main(
            [
                "run",
                "--backend",
                f"exec:{STUB} --mode fail",
                "--dataset",
                str(built_dataset),
                "--manifest",
                str(manifest_path),
                "--out",
                str(tmp_path / "run"),
            ]
        )
        assert code == 3

    def test_unknown_backend_flag_rejected(self, built_dataset, tmp_path):
        manifest = RunManifest(BASELINE_MODEL_ID, "v01", 1033, BASELINE_TRAINING_CONFIG)
        manifest_path = tmp_path / "m.json"
        manifest.save(manifest_path)
        code = main(
            [
                "run",
                "--backend",
                "magic",
                "--dataset",
                str(built_dataset),
                "--manifest",
                str(manifest_path),
                "--out",
                str(tmp_path / "run"),
            ]
        )
        assert code == 1


class TestAnalyzeAttributeVote:
    def test_analyze(self, baseline_run, tmp_path, capsys):
        code = main(
            ["analyze", "--runs", str(baseline_run / "runs" / "*"), "--out", str(tmp_path / "analysis")]
        )
        assert code == 0
        assert (tmp_path / "analysis" / f"{BASELINE_MODEL_ID}_4c_confusion.csv").exists()
        assert (tmp_path / "analysis" / f"{BASELINE_MODEL_ID}_4c_similarity.json").exists()

    def test_attribute_and_vote(self, baseline_run, built_dataset, tmp_path, capsys):
        out = tmp_path / "attr"
        code = main(
            [
                "attribute",
                "--tiles",
                str(built_dataset / "external_held-out.json"),
                "--runs",
                str(baseline_run / "runs" / "*"),
                "--scheme",
                "macro4",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        verdicts_path = out / "held-out" / "verdicts.json"
        assert verdicts_path.exists()
        doc = json.loads(verdicts_path.read_text())
        assert doc["final"] == "Author2"

        vote_out = tmp_path / "vote.json"
        code = main(["vote", "--verdicts", str(verdicts_path), "--out", str(vote_out)])
        assert code == 0
        assert json.loads(vote_out.read_text())["final"] == "Author2"
        assert "Author2" in capsys.readouterr().out

    def test_no_matching_runs_is_validation_error(self, tmp_path):
        code = main(["analyze", "--runs", str(tmp_path / "nothing*"), "--out", str(tmp_path / "a")])
        assert code == 1


class TestExperimentAndReport:
    def test_full_experiment_and_report(self, workspace, tmp_path, capsys):
        out_root = tmp_path / "exp"
        config = {
            "annotations": str(workspace["annotations"]),
            "dataset_types": ["v01"],
            "seeds": [1033],
            "backends": [{"model_id": BASELINE_MODEL_ID, "kind": "baseline"}],
            "out_root": str(out_root),
            "augmentation": LIGHT_PARAMS.to_json(),
            "external_sets": [
                {"set_id": "held-out", "annotations": str(workspace["external"])}
            ],
            "storage": "inline",
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        code = main(["experiment", "--config", str(config_path)])
        assert code == 0
        assert (out_root / "ledger.json").exists()
        out = capsys.readouterr().out
        assert "attribution 'held-out': Author2" in out

        code = main(
            ["report", "--ledger", str(out_root / "ledger.json"), "--out", str(tmp_path / "rep")]
        )
        assert code == 0
        assert (tmp_path / "rep" / "report.md").exists()
        assert list((tmp_path / "rep" / "figures").glob("confusion_*.svg"))

    def test_partial_failure_exit_code(self, workspace, tmp_path):
        out_root = tmp_path / "exp"
        config = {
            "annotations": str(workspace["annotations"]),
            "dataset_types": ["v01"],
            "seeds": [1033],
            "backends": [
                {"model_id": BASELINE_MODEL_ID, "kind": "baseline"},
                {"model_id": "broken", "kind": "exec", "command": STUB + " --mode fail"},
            ],
            "out_root": str(out_root),
            "augmentation": LIGHT_PARAMS.to_json(),
            "storage": "inline",
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config))
        assert main(["experiment", "--config", str(config_path)]) == 2
