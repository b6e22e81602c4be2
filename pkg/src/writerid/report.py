"""Render an experiment ledger into a human-readable bundle.

The bundle is static: report.md, CSV tables, SVG heatmaps (summed
confusion matrices and external score tables), and PNG learning curves.
Every artifact the ledger references must exist on disk; a missing file is
an error, not a silent gap.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .experiment import ExperimentLedger
from .harness import read_loss_curve, read_predictions
from .similarity import ConfusionMatrix
from .voting import read_verdict_file


@dataclass(eq=False)
class ReportBundle:
    report_md: Path
    figures: list[Path]
    tables: list[Path]


def _check_artifacts(ledger: ExperimentLedger, root: Path) -> None:
    paths: list[str] = []
    for run in ledger.runs:
        paths.extend(run.get("artifacts", {}).values())
    for group in ledger.analysis.values():
        paths.extend(group[k] for k in ("confusion", "confusion_csv", "similarity"))
    for entry in ledger.attribution.values():
        paths.extend((entry["verdicts"], entry["vote"]))
    for rel in paths:
        if not (root / rel).exists():
            raise ValidationError(f"ledger references missing artifact {rel!r}")


def _confusion_figure(matrix: ConfusionMatrix, title: str, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    counts = matrix.counts
    im = ax.imshow(counts, cmap="Blues")
    labels = [f"C{i}" for i in range(1, matrix.n + 1)]
    ax.set_xticks(range(matrix.n), labels)
    ax.set_yticks(range(matrix.n), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    threshold = counts.max() / 2 if counts.max() else 0.5
    for i in range(matrix.n):
        for j in range(matrix.n):
            ax.text(
                j,
                i,
                str(counts[i, j]),
                ha="center",
                va="center",
                fontsize=7,
                color="white" if counts[i, j] > threshold else "black",
            )
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def _curve_figure(losses, title: str, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 2.8))
    ax.plot(range(1, len(losses) + 1), losses, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def _scores_figure(score_rows: np.ndarray, title: str, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(4.2, max(2.0, 0.18 * score_rows.shape[0] + 1.2)))
    im = ax.imshow(score_rows, cmap="Blues", aspect="auto", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(score_rows.shape[1]), [f"C{i+1}" for i in range(score_rows.shape[1])])
    ax.set_ylabel("tile")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def _md_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def render_report(ledger: ExperimentLedger, root: str | Path, out_dir: str | Path) -> ReportBundle:
    """Write report.md plus figures/ and tables/ under out_dir.

    `root` is the experiment output root the ledger's relative paths are
    anchored at.
    """
    root = Path(root)
    out_dir = Path(out_dir)
    figures_dir = out_dir / "figures"
    tables_dir = out_dir / "tables"
    figures_dir.mkdir(parents=True, exist_ok=True)
    tables_dir.mkdir(parents=True, exist_ok=True)
    _check_artifacts(ledger, root)

    figures: list[Path] = []
    tables: list[Path] = []
    md: list[str] = ["# Writer-attribution experiment report", ""]

    md.append("## Configuration")
    md.append("")
    cfg = ledger.config
    md.append(
        _md_table(
            ["setting", "value"],
            [
                ["dataset types", ", ".join(cfg["dataset_types"])],
                ["seeds", ", ".join(str(s) for s in cfg["seeds"])],
                ["backends", ", ".join(b["model_id"] for b in cfg["backends"])],
                ["split ratio", str(cfg["split_ratio"])],
                ["exclusion policy", cfg["exclusion_policy"]],
                ["tally mode", cfg["tally_mode"]],
                ["overall digest", ledger.digests["overall"][:16]],
            ],
        )
    )

    md.append("## Datasets")
    md.append("")
    md.append(
        _md_table(
            ["dataset", "tile px", "samples", "train/test"],
            [
                [
                    key,
                    str(meta["tile_size"]),
                    str(meta["n_samples"]),
                    f"{sum(meta['counts']['train'].values())}/{sum(meta['counts']['test'].values())}",
                ]
                for key, meta in sorted(ledger.datasets.items())
            ],
        )
    )

    md.append("## Runs")
    md.append("")
    rows = []
    for run in ledger.runs:
        metrics = run.get("metrics", {})
        rows.append(
            [
                run["run_id"],
                run["status"],
                f"{metrics.get('test_accuracy', float('nan')):.4f}" if metrics else "-",
                str(metrics.get("n_epochs", "-")) if metrics else "-",
                run.get("convergence", "-"),
            ]
        )
    md.append(_md_table(["run", "status", "test accuracy", "epochs", "convergence"], rows))

    excluded = [r for r in ledger.runs if r["status"] == "excluded"]
    failed = [r for r in ledger.runs if r["status"] == "failed"]
    if excluded or failed:
        md.append("### Excluded and failed runs")
        md.append("")
        for run in excluded:
            md.append(f"- `{run['run_id']}` excluded: {run.get('exclusion_reason', '?')}")
        for run in failed:
            md.append(f"- `{run['run_id']}` failed: {run.get('error', '?')}")
        md.append("")

    # Learning curves for completed and excluded runs (both have curves).
    for run in ledger.runs:
        if "loss_curve" not in run.get("artifacts", {}):
            continue
        curve = read_loss_curve(root / run["artifacts"]["loss_curve"], run["run_id"])
        fig_path = figures_dir / f"curve_{run['run_id']}.png"
        _curve_figure(curve.losses, run["run_id"], fig_path)
        figures.append(fig_path)

    if ledger.analysis:
        md.append("## Summed confusion matrices and similarity")
        md.append("")
        for stem, group in sorted(ledger.analysis.items()):
            matrix = ConfusionMatrix.from_json(
                json.loads((root / group["confusion"]).read_text())
            )
            fig_path = figures_dir / f"confusion_{stem}.svg"
            _confusion_figure(
                matrix, f"{group['model_id']} ({group['n_classes']} classes)", fig_path
            )
            figures.append(fig_path)
            table_path = tables_dir / f"confusion_{stem}.csv"
            shutil.copyfile(root / group["confusion_csv"], table_path)
            tables.append(table_path)
            md.append(f"### {group['model_id']}, {group['n_classes']} classes")
            md.append("")
            md.append(f"![confusion](figures/{fig_path.name})")
            md.append("")
            md.append(
                _md_table(
                    ["class pair", "similarity"],
                    [[pair, str(v)] for pair, v in sorted(group["summary"]["pairs"].items())],
                )
            )
            for rel in group["summary"]["relations"]:
                branch = f" (branch: {rel['branch']})" if rel.get("branch") else ""
                verdict = "holds" if rel["holds"] else "does not hold"
                md.append(f"- relation `{rel['name']}` {verdict}{branch}; values {rel['values']}")
            md.append("")

    if ledger.attribution:
        md.append("## Attribution of held-out tile sets")
        md.append("")
        for set_id, entry in sorted(ledger.attribution.items()):
            _, verdicts, _ = read_verdict_file(root / entry["verdicts"])
            md.append(f"### Set `{set_id}` -> **{entry['final']}**")
            md.append("")
            md.append(
                _md_table(
                    ["run", "tiles Author1", "tiles Author2", "verdict"],
                    [
                        [v.run_id, str(v.n_author1), str(v.n_author2), v.verdict]
                        for v in verdicts
                    ],
                )
            )
            md.append(
                _md_table(
                    ["model", "step-1 winner"],
                    [[m, w] for m, w in sorted(entry["step1"].items())],
                )
            )
            for run in ledger.runs:
                if run["status"] != "completed":
                    continue
                key = f"external_{set_id}"
                if key not in run["artifacts"]:
                    continue
                records = read_predictions(root / run["artifacts"][key])
                from .harness import softmax  # row-normalized score heatmap

                rows_arr = np.vstack([softmax(r.raw_scores) for r in records])
                fig_path = figures_dir / f"scores_{set_id}_{run['run_id']}.svg"
                _scores_figure(rows_arr, f"{set_id}: {run['run_id']}", fig_path)
                figures.append(fig_path)
            md.append("")

    report_path = out_dir / "report.md"
    report_path.write_text("\n".join(md))
    return ReportBundle(report_md=report_path, figures=figures, tables=tables)
