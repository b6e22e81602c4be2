"""Minimal conforming (and deliberately misbehaving) backend for protocol tests.

Reads the job file, echoes one-hot raw scores for every test tile, and
emits a loss curve sized to the run manifest's epoch count.  Modes:

    ok         conforming output (default)
    omit       drop one test sample from the predictions
    wronglen   emit score vectors with one extra entry
    diverge    conforming predictions but a flat (non-converging) loss curve
    shortcurve emit one loss fewer than the configured epochs
    fail       exit nonzero without writing anything
"""

from __future__ import annotations

import argparse
import json
import sys
import zlib
from pathlib import Path


def one_hot(n: int, hot: int) -> list[float]:
    return [1.0 if c == hot else 0.0 for c in range(1, n + 1)]


def predict_rows(samples, n, partition):
    rows = []
    for row in samples:
        if row["partition"] != partition:
            continue
        true = row["true_class"]
        hot = true if true is not None else 1
        rows.append(
            {
                "sample_id": row["sample_id"],
                "true_class": true,
                "raw_scores": one_hot(n, hot),
                "predicted_class": hot,
            }
        )
    return rows


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--mode", default="ok")
    sub = parser.add_subparsers(dest="command", required=True)
    train = sub.add_parser("train")
    train.add_argument("--job", required=True)
    args = parser.parse_args()

    if args.mode == "fail":
        print("stub backend asked to fail", file=sys.stderr)
        return 2

    job = json.loads(Path(args.job).read_text())
    dataset = json.loads(Path(job["dataset_manifest"]).read_text())
    run_manifest = json.loads(Path(job["run_manifest"]).read_text())
    out_dir = Path(job["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    n = dataset["spec"]["n_classes"]

    rows = predict_rows(dataset["samples"], n, "test")
    if args.mode == "omit":
        rows = rows[:-1]
    if args.mode == "wronglen":
        for row in rows:
            row["raw_scores"] = row["raw_scores"] + [0.0]
    with open(out_dir / "predictions.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")

    epochs = run_manifest["training_config"]["epochs"]
    if args.mode == "diverge":
        losses = [1.0] * epochs
    else:
        losses = [1.0 * (0.5**i) for i in range(epochs)]
    if args.mode == "shortcurve":
        losses = losses[:-1]
    (out_dir / "loss_curve.json").write_text(json.dumps(losses))

    for ext_path in job.get("external_sets", []):
        ext = json.loads(Path(ext_path).read_text())
        ext_rows = []
        for row in ext["samples"]:
            hot = 1 + zlib.crc32(row["sample_id"].encode()) % n
            ext_rows.append(
                {
                    "sample_id": row["sample_id"],
                    "true_class": None,
                    "raw_scores": one_hot(n, hot),
                    "predicted_class": hot,
                }
            )
        with open(out_dir / f"external_{ext['set_id']}.jsonl", "w") as fh:
            for row in ext_rows:
                fh.write(json.dumps(row) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
