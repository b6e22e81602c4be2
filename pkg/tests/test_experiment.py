import json
import sys
from pathlib import Path

import pytest

from conftest import LIGHT_PARAMS
from writerid.datasets import DATASET_FAMILIES
from writerid.errors import ValidationError
from writerid.experiment import (
    BackendSpec,
    ExperimentConfig,
    ExperimentLedger,
    ExternalSetSpec,
    experiment_exit_code,
    run_experiment,
)
from writerid.harness import BASELINE_MODEL_ID, TrainingConfig
from writerid.report import render_report

STUB = f"{sys.executable} {Path(__file__).parent / 'stub_backend.py'}"


def base_config(workspace, out_root, **overrides):
    defaults = dict(
        annotations=str(workspace["annotations"]),
        dataset_types=["v01", "v02"],
        backends=[BackendSpec(model_id=BASELINE_MODEL_ID, kind="baseline")],
        out_root=str(out_root),
        seeds=[1033, 1931],
        augmentation=LIGHT_PARAMS,
        external_sets=[ExternalSetSpec("held-out", str(workspace["external"]))],
        storage="inline",
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


@pytest.fixture(scope="module")
def fixture_ledger(synth_workspace, tmp_path_factory):
    out_root = tmp_path_factory.mktemp("exp")
    config = base_config(synth_workspace, out_root)
    return out_root, run_experiment(config)


class TestConfig:
    def test_zero_backends_rejected(self, synth_workspace, tmp_path):
        with pytest.raises(ValidationError):
            base_config(synth_workspace, tmp_path, backends=[])

    def test_duplicate_seeds_rejected(self, synth_workspace, tmp_path):
        with pytest.raises(ValidationError):
            base_config(synth_workspace, tmp_path, seeds=[1033, 1033])

    def test_unknown_dataset_type_rejected(self, synth_workspace, tmp_path):
        with pytest.raises(ValidationError):
            base_config(synth_workspace, tmp_path, dataset_types=["v99"])

    def test_config_file_roundtrip(self, synth_workspace, tmp_path):
        config = base_config(synth_workspace, tmp_path / "out")
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config.to_json()))
        loaded = ExperimentConfig.load(path)
        assert loaded.to_json() == config.to_json()


class TestRunExperiment:
    def test_run_grid_is_the_full_product(self, fixture_ledger):
        # backends x dataset types x seeds, enumerated exactly once each.
        _, ledger = fixture_ledger
        run_ids = {r["run_id"] for r in ledger.runs}
        expected = {
            f"{BASELINE_MODEL_ID}__{t}__{s}" for t in ("v01", "v02") for s in (1033, 1931)
        }
        assert run_ids == expected
        assert all(r["status"] == "completed" for r in ledger.runs)
        assert experiment_exit_code(ledger) == 0

    def test_every_referenced_artifact_exists(self, fixture_ledger):
        out_root, ledger = fixture_ledger
        for run in ledger.runs:
            for rel in run["artifacts"].values():
                assert (out_root / rel).exists(), rel
        for group in ledger.analysis.values():
            assert (out_root / group["confusion"]).exists()
            assert (out_root / group["similarity"]).exists()

    def test_attribution_recovers_the_generating_hand(self, fixture_ledger):
        _, ledger = fixture_ledger
        assert ledger.attribution["held-out"]["final"] == "Author2"

    def test_analysis_groups_by_model_and_scheme(self, fixture_ledger):
        _, ledger = fixture_ledger
        assert set(ledger.analysis) == {f"{BASELINE_MODEL_ID}_4c"}
        group = ledger.analysis[f"{BASELINE_MODEL_ID}_4c"]
        assert len(group["runs"]) == 4

    def test_baseline_curves_are_not_assessed(self, fixture_ledger):
        _, ledger = fixture_ledger
        assert all(r["convergence"] == "not_assessed" for r in ledger.runs)

    def test_rerun_reproduces_digests(self, synth_workspace, tmp_path):
        a = run_experiment(base_config(synth_workspace, tmp_path / "a", seeds=[1033]))
        b = run_experiment(base_config(synth_workspace, tmp_path / "b", seeds=[1033]))
        # out_root differs, so compare the content digests that exclude it.
        assert a.digests["datasets"] == b.digests["datasets"]
        assert a.digests["runs"] == b.digests["runs"]
        assert a.digests["analysis"] == b.digests["analysis"]
        assert a.digests["attribution"] == b.digests["attribution"]

    def test_ledger_file_roundtrip(self, fixture_ledger):
        out_root, ledger = fixture_ledger
        loaded = ExperimentLedger.load(out_root / "ledger.json")
        assert loaded.digests == ledger.digests
        assert [r["run_id"] for r in loaded.runs] == [r["run_id"] for r in ledger.runs]


class TestExclusionAndFailures:
    def test_diverging_backend_run_is_excluded(self, synth_workspace, tmp_path):
        config = base_config(
            synth_workspace,
            tmp_path / "out",
            dataset_types=["v01"],
            seeds=[1033],
            backends=[
                BackendSpec(model_id=BASELINE_MODEL_ID, kind="baseline"),
                BackendSpec(
                    model_id="stub-cnn",
                    kind="exec",
                    command=STUB + " --mode diverge",
                    training_config=TrainingConfig(epochs=12, input_resize=32),
                ),
            ],
        )
        ledger = run_experiment(config)
        by_model = {r["model_id"]: r for r in ledger.runs}
        assert by_model["stub-cnn"]["status"] == "excluded"
        assert "convergence" in by_model["stub-cnn"]
        assert by_model[BASELINE_MODEL_ID]["status"] == "completed"
        # Excluded runs contribute to no summed matrix and no vote.
        assert set(ledger.analysis) == {f"{BASELINE_MODEL_ID}_4c"}
        verdict_runs = json.loads(
            (tmp_path / "out" / ledger.attribution["held-out"]["verdicts"]).read_text()
        )["runs"]
        assert all(v["model_id"] == BASELINE_MODEL_ID for v in verdict_runs)
        assert experiment_exit_code(ledger) == 0  # exclusion is not failure

    def test_include_policy_keeps_diverging_run(self, synth_workspace, tmp_path):
        config = base_config(
            synth_workspace,
            tmp_path / "out",
            dataset_types=["v01"],
            seeds=[1033],
            exclusion_policy="include",
            backends=[
                BackendSpec(
                    model_id="stub-cnn",
                    kind="exec",
                    command=STUB + " --mode diverge",
                    training_config=TrainingConfig(epochs=12, input_resize=32),
                ),
            ],
        )
        ledger = run_experiment(config)
        (record,) = ledger.runs
        assert record["status"] == "completed"
        assert record["convergence"] == "not_converged"

    def test_failing_backend_isolated(self, synth_workspace, tmp_path):
        config = base_config(
            synth_workspace,
            tmp_path / "out",
            dataset_types=["v01"],
            seeds=[1033],
            backends=[
                BackendSpec(model_id=BASELINE_MODEL_ID, kind="baseline"),
                BackendSpec(model_id="broken", kind="exec", command=STUB + " --mode fail"),
            ],
        )
        ledger = run_experiment(config)
        statuses = {r["model_id"]: r["status"] for r in ledger.runs}
        assert statuses == {BASELINE_MODEL_ID: "completed", "broken": "failed"}
        assert experiment_exit_code(ledger) == 2

    def test_all_failing_is_total_failure(self, synth_workspace, tmp_path):
        config = base_config(
            synth_workspace,
            tmp_path / "out",
            dataset_types=["v01"],
            seeds=[1033],
            external_sets=[],
            backends=[BackendSpec(model_id="broken", kind="exec", command=STUB + " --mode fail")],
        )
        ledger = run_experiment(config)
        assert experiment_exit_code(ledger) == 3

    def test_parallel_execution_matches_serial_digests(self, synth_workspace, tmp_path):
        serial = run_experiment(
            base_config(synth_workspace, tmp_path / "serial", seeds=[1033], parallelism=1)
        )
        parallel = run_experiment(
            base_config(synth_workspace, tmp_path / "parallel", seeds=[1033], parallelism=4)
        )
        assert serial.digests["runs"] == parallel.digests["runs"]
        assert serial.digests["analysis"] == parallel.digests["analysis"]


class TestRenderReport:
    def test_bundle_contents(self, fixture_ledger, tmp_path):
        out_root, ledger = fixture_ledger
        bundle = render_report(ledger, out_root, tmp_path / "report")
        assert bundle.report_md.exists()
        # One confusion heatmap per (model, scheme) group.
        heatmaps = [f for f in bundle.figures if f.name.startswith("confusion_")]
        assert len(heatmaps) == len(ledger.analysis)
        # One learning curve per run with a curve artifact.
        curves = [f for f in bundle.figures if f.name.startswith("curve_")]
        assert len(curves) == len(ledger.runs)
        text = bundle.report_md.read_text()
        assert "held-out" in text
        assert "Author2" in text

    def test_excluded_runs_are_listed(self, synth_workspace, tmp_path):
        config = base_config(
            synth_workspace,
            tmp_path / "out",
            dataset_types=["v01"],
            seeds=[1033],
            backends=[
                BackendSpec(
                    model_id="stub-cnn",
                    kind="exec",
                    command=STUB + " --mode diverge",
                    training_config=TrainingConfig(epochs=12, input_resize=32),
                ),
            ],
        )
        ledger = run_experiment(config)
        bundle = render_report(ledger, tmp_path / "out", tmp_path / "report")
        text = bundle.report_md.read_text()
        assert "Excluded and failed runs" in text
        assert "excluded:" in text

    def test_similarity_section_omitted_without_analysis(self, fixture_ledger, tmp_path):
        out_root, ledger = fixture_ledger
        stripped = ExperimentLedger(
            config=ledger.config,
            datasets=ledger.datasets,
            runs=ledger.runs,
            analysis={},
            attribution=ledger.attribution,
            digests=ledger.digests,
        )
        bundle = render_report(stripped, out_root, tmp_path / "report")
        text = bundle.report_md.read_text()
        assert "Summed confusion matrices" not in text
        assert "relation" not in text

    def test_missing_artifact_is_an_error(self, fixture_ledger, tmp_path):
        out_root, ledger = fixture_ledger
        broken = ExperimentLedger(
            config=ledger.config,
            datasets=ledger.datasets,
            runs=[
                {
                    **ledger.runs[0],
                    "artifacts": {
                        **ledger.runs[0]["artifacts"],
                        "predictions": "runs/nowhere/predictions.jsonl",
                    },
                }
            ],
            analysis={},
            attribution={},
            digests=ledger.digests,
        )
        with pytest.raises(ValidationError, match="missing artifact"):
            render_report(broken, out_root, tmp_path / "report")
