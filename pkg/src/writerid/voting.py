"""Per-tile author scoring of held-out regions and the 2-step majority vote.

Step 1 tallies run verdicts per model type; step 2 takes the majority over
the per-model winners.  Ties are first-class values at every level: a run
with equal tile counts is a Tie, a model whose runs tie is a Tie, and a
tied final vote is reported as Inconclusive, never silently broken.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

from .annotations import AUTHOR1, AUTHOR2, ClassScheme
from .datasets import ExternalTileSet
from .errors import ValidationError
from .harness import PredictionRecord, RunManifest, softmax, top_class

Verdict = Literal["Author1", "Author2", "Tie"]
TallyMode = Literal["per-run", "per-tile"]


@dataclass(frozen=True)
class TileScore:
    """One external tile's class decision, author, and softmax row."""

    sample_id: str
    predicted_class: int
    author: str
    score: float
    class_scores: tuple[float, ...]


def score_external(
    tile_set: ExternalTileSet,
    records: Sequence[PredictionRecord],
    scheme: ClassScheme,
) -> list[TileScore]:
    """Map backend predictions for an external set to per-tile author calls.

    Requires exactly one record per tile; the emitted rows (tiles x classes,
    softmax values) are the score-heatmap table.
    """
    by_id = {r.sample_id: r for r in records}
    scores = []
    for tile in tile_set.tiles:
        record = by_id.get(tile.sample_id)
        if record is None:
            raise ValidationError(
                f"external set {tile_set.set_id!r}: no prediction for {tile.sample_id!r}"
            )
        if len(record.raw_scores) != scheme.n_classes:
            raise ValidationError(
                f"{tile.sample_id!r}: {len(record.raw_scores)} scores for "
                f"{scheme.n_classes}-class scheme {scheme.scheme_id!r}"
            )
        cls, top = top_class(record.raw_scores)
        scores.append(
            TileScore(
                sample_id=tile.sample_id,
                predicted_class=cls,
                author=scheme.author_of(cls),
                score=top,
                class_scores=tuple(softmax(record.raw_scores)),
            )
        )
    return scores


@dataclass(frozen=True)
class RunVerdict:
    model_id: str
    dataset_type: str
    seed: int
    n_author1: int
    n_author2: int
    verdict: Verdict

    @property
    def run_id(self) -> str:
        return f"{self.model_id}__{self.dataset_type}__{self.seed}"

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "dataset_type": self.dataset_type,
            "seed": self.seed,
            "counts": [self.n_author1, self.n_author2],
            "verdict": self.verdict,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RunVerdict":
        return cls(
            model_id=doc["model_id"],
            dataset_type=doc["dataset_type"],
            seed=doc["seed"],
            n_author1=doc["counts"][0],
            n_author2=doc["counts"][1],
            verdict=doc["verdict"],
        )


def run_verdict(manifest: RunManifest, tile_authors: Sequence[str]) -> RunVerdict:
    """Majority over one run's per-tile author assignments; equal counts tie."""
    if not tile_authors:
        raise ValidationError(f"run {manifest.run_id}: no tiles to vote over")
    counts = Counter(tile_authors)
    unknown = set(counts) - {AUTHOR1, AUTHOR2}
    if unknown:
        raise ValidationError(f"unknown author labels {sorted(unknown)}")
    n1, n2 = counts.get(AUTHOR1, 0), counts.get(AUTHOR2, 0)
    verdict: Verdict = AUTHOR1 if n1 > n2 else AUTHOR2 if n2 > n1 else "Tie"
    return RunVerdict(
        model_id=manifest.model_id,
        dataset_type=manifest.dataset_type,
        seed=manifest.seed,
        n_author1=n1,
        n_author2=n2,
        verdict=verdict,
    )


@dataclass(frozen=True)
class ModelTally:
    runs_author1: int
    runs_author2: int
    ties: int
    tiles_author1: int
    tiles_author2: int


@dataclass(eq=False)
class VoteTally:
    mode: TallyMode
    per_model: dict[str, ModelTally]
    step1: dict[str, Verdict]
    final: str  # "Author1" | "Author2" | "Inconclusive"

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "per_model": {
                m: {
                    "runs": [t.runs_author1, t.runs_author2],
                    "ties": t.ties,
                    "tiles": [t.tiles_author1, t.tiles_author2],
                }
                for m, t in sorted(self.per_model.items())
            },
            "step1": dict(sorted(self.step1.items())),
            "final": self.final,
        }


def _majority(n1: int, n2: int) -> Verdict:
    return AUTHOR1 if n1 > n2 else AUTHOR2 if n2 > n1 else "Tie"


def majority_vote(verdicts: Sequence[RunVerdict], mode: TallyMode = "per-run") -> VoteTally:
    """Step 1 per model type, step 2 across the per-model winners.

    per-run mode (default): each run contributes its verdict; run ties count
    toward neither author.  per-tile mode: each run contributes its raw tile
    counts instead (the sensitivity-analysis alternative).
    """
    if not verdicts:
        raise ValidationError("no run verdicts to vote over")
    seen: set[str] = set()
    grouped: dict[str, list[RunVerdict]] = {}
    for v in verdicts:
        if v.run_id in seen:
            raise ValidationError(f"duplicate run verdict {v.run_id!r}")
        seen.add(v.run_id)
        grouped.setdefault(v.model_id, []).append(v)

    per_model: dict[str, ModelTally] = {}
    step1: dict[str, Verdict] = {}
    for model_id in sorted(grouped):
        group = grouped[model_id]
        runs1 = sum(1 for v in group if v.verdict == AUTHOR1)
        runs2 = sum(1 for v in group if v.verdict == AUTHOR2)
        ties = sum(1 for v in group if v.verdict == "Tie")
        tiles1 = sum(v.n_author1 for v in group)
        tiles2 = sum(v.n_author2 for v in group)
        per_model[model_id] = ModelTally(runs1, runs2, ties, tiles1, tiles2)
        if mode == "per-run":
            step1[model_id] = _majority(runs1, runs2)
        elif mode == "per-tile":
            step1[model_id] = _majority(tiles1, tiles2)
        else:
            raise ValidationError(f"unknown tally mode {mode!r}")

    votes1 = sum(1 for w in step1.values() if w == AUTHOR1)
    votes2 = sum(1 for w in step1.values() if w == AUTHOR2)
    final = _majority(votes1, votes2)
    return VoteTally(
        mode=mode,
        per_model=per_model,
        step1=step1,
        final=final if final != "Tie" else "Inconclusive",
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_verdict_file(
    path: str | Path, set_id: str, verdicts: Sequence[RunVerdict], tally: VoteTally
) -> None:
    doc = {
        "set_id": set_id,
        "runs": [v.to_json() for v in verdicts],
        "step1": tally.to_json()["step1"],
        "per_model": tally.to_json()["per_model"],
        "mode": tally.mode,
        "final": tally.final,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_verdict_file(path: str | Path) -> tuple[str, list[RunVerdict], str]:
    doc = json.loads(Path(path).read_text())
    return (
        doc["set_id"],
        [RunVerdict.from_json(v) for v in doc["runs"]],
        doc.get("mode", "per-run"),
    )


def write_score_table(path: str | Path, scores: Sequence[TileScore], n_classes: int) -> None:
    """Tiles x classes softmax table (the score-heatmap data), one row per tile."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["sample_id"]
            + [f"class_{c}" for c in range(1, n_classes + 1)]
            + ["predicted_class", "author"]
        )
        for s in scores:
            writer.writerow(
                [s.sample_id]
                + [format(v, ".6f") for v in s.class_scores]
                + [str(s.predicted_class), s.author]
            )
