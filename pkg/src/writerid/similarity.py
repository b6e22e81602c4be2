"""Confusion matrices and the confusion-count similarity between classes.

Similarity between two plain classes is the summed pair of mirrored
off-diagonal cells.  Under the 8-class scheme, neighboring classes (1&2,
3&4, 5&6, 7&8) act as one unit: similarity between two such blocks sums
the eight cells of the two mirrored 2x2 off-blocks, and the four diagonal
2x2 blocks never count.  Orderings between similarities are meaningful
only within one model's results, so reports are keyed by model id.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .harness import PredictionRecord


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """n x n counts; rows are true classes, columns predicted, both 1-indexed."""

    n: int
    counts: np.ndarray
    provenance: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=np.int64)  # copy: callers keep their arrays
        if counts.shape != (self.n, self.n):
            raise ValidationError(f"counts must be {self.n}x{self.n}")
        if np.any(counts < 0):
            raise ValidationError("confusion counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def at(self, i: int, j: int) -> int:
        """Count of (true class i, predicted class j), 1-indexed."""
        if not (1 <= i <= self.n and 1 <= j <= self.n):
            raise ValidationError(f"class indices ({i}, {j}) outside 1..{self.n}")
        return int(self.counts[i - 1, j - 1])

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "counts": self.counts.tolist(),
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ConfusionMatrix":
        return cls(
            n=doc["n"], counts=np.asarray(doc["counts"]), provenance=tuple(doc.get("provenance", ()))
        )


def confusion_matrix(
    records: Sequence[PredictionRecord], n: int, provenance: Iterable[str] = ()
) -> ConfusionMatrix:
    counts = np.zeros((n, n), dtype=np.int64)
    for r in records:
        if r.true_class is None:
            raise ValidationError(f"record {r.sample_id!r} is unlabeled")
        if not (1 <= r.true_class <= n and 1 <= r.predicted_class <= n):
            raise ValidationError(
                f"record {r.sample_id!r}: classes ({r.true_class}, {r.predicted_class}) "
                f"outside 1..{n}"
            )
        counts[r.true_class - 1, r.predicted_class - 1] += 1
    return ConfusionMatrix(n=n, counts=counts, provenance=tuple(provenance))


def sum_matrices(matrices: Sequence[ConfusionMatrix]) -> ConfusionMatrix:
    """Element-wise sum; provenance concatenates in input order."""
    if not matrices:
        raise ValidationError("nothing to sum")
    n = matrices[0].n
    if any(m.n != n for m in matrices):
        raise ValidationError("matrices differ in dimension")
    total = np.zeros((n, n), dtype=np.int64)
    provenance: list[str] = []
    for m in matrices:
        total += m.counts
        provenance.extend(m.provenance)
    return ConfusionMatrix(n=n, counts=total, provenance=tuple(provenance))


def similarity4(matrix: ConfusionMatrix, i: int, j: int) -> int:
    """Mirrored-cell similarity between two plain classes: a[i,j] + a[j,i]."""
    if i == j:
        raise ValidationError("similarity is defined between distinct classes")
    return matrix.at(i, j) + matrix.at(j, i)


def similarity8(matrix: ConfusionMatrix, i: int, j: int) -> int:
    """Similarity between neighboring-class blocks i&i+1 and j&j+1 (odd i != j).

    Sums the eight cells of the two mirrored off-blocks; the 2x2 diagonal
    blocks (matching cases) are never part of any pair's value.
    """
    if matrix.n != 8:
        raise ValidationError("block similarity is defined on 8-class matrices")
    if i % 2 == 0 or j % 2 == 0:
        raise ValidationError("block indices must be odd (1, 3, 5, 7)")
    if i == j:
        raise ValidationError("similarity is defined between distinct blocks")
    upper = sum(matrix.at(a, b) for a in (i, i + 1) for b in (j, j + 1))
    lower = sum(matrix.at(b, a) for a in (i, i + 1) for b in (j, j + 1))
    return upper + lower


def off_diagonal_mass(matrix: ConfusionMatrix) -> int:
    return int(matrix.counts.sum() - np.trace(matrix.counts))


def off_block_mass(matrix: ConfusionMatrix) -> int:
    """Total count outside the four 2x2 diagonal blocks of an 8-class matrix."""
    if matrix.n != 8:
        raise ValidationError("off-block mass is defined on 8-class matrices")
    inside = sum(
        matrix.at(a, b)
        for lead in (1, 3, 5, 7)
        for a in (lead, lead + 1)
        for b in (lead, lead + 1)
    )
    return int(matrix.counts.sum()) - inside


# ---------------------------------------------------------------------------
# Relation predicates and reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelationThresholds:
    """Fixed constants that make the informal ~0, >>, ~ relations mechanical."""

    near_zero_frac: float = 0.01
    much_greater_factor: float = 5.0
    comparable_low: float = 0.8
    comparable_high: float = 1.25

    def to_json(self) -> dict:
        return {
            "near_zero_frac": self.near_zero_frac,
            "much_greater_factor": self.much_greater_factor,
            "comparable_low": self.comparable_low,
            "comparable_high": self.comparable_high,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RelationThresholds":
        return cls(**doc)


DEFAULT_THRESHOLDS = RelationThresholds()


def near_zero(value: int, total_mass: int, thr: RelationThresholds = DEFAULT_THRESHOLDS) -> bool:
    """value is negligible against the total off-diagonal (or off-block) mass."""
    if value < 0 or total_mass < 0:
        raise ValidationError("similarity values are non-negative")
    return value <= thr.near_zero_frac * total_mass


def much_greater(a: int, b: int, thr: RelationThresholds = DEFAULT_THRESHOLDS) -> bool:
    return a >= thr.much_greater_factor * max(b, 1)


def comparable(a: int, b: int, thr: RelationThresholds = DEFAULT_THRESHOLDS) -> bool:
    """Same order of magnitude; with b = 0 only a = 0 qualifies."""
    if b == 0:
        return a == 0
    return thr.comparable_low <= a / b <= thr.comparable_high


@dataclass(frozen=True)
class RelationResult:
    name: str
    holds: bool
    branch: str | None
    values: dict[str, int]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "holds": self.holds,
            "branch": self.branch,
            "values": dict(self.values),
        }


@dataclass(eq=False)
class SimilarityReport:
    """All pairwise similarities of one summed matrix, plus relation verdicts."""

    model_id: str
    scheme: int  # 4 or 8
    pairs: dict[tuple[int, int], int]
    relations: list[RelationResult] = field(default_factory=list)

    @property
    def total_mass(self) -> int:
        return sum(self.pairs.values())

    def pair(self, i: int, j: int) -> int:
        key = (min(i, j), max(i, j))
        if key not in self.pairs:
            raise ValidationError(f"pair {key} not present in the report")
        return self.pairs[key]

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "scheme": self.scheme,
            "pairs": {f"({i},{j})": v for (i, j), v in sorted(self.pairs.items())},
            "relations": [r.to_json() for r in self.relations],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _ordering_relation(
    name: str, a: int, b: int, c: int, labels: tuple[str, str, str], thr: RelationThresholds
) -> RelationResult:
    """Branch "strict" when a > b >> c, "comparable" when a ~ b >> c, else "neither".

    a is the far cross-author similarity, b the near one, c the remaining
    cross pair whose smallness both branches require.
    """
    branch = "neither"
    if much_greater(b, c, thr):
        if a > b:
            branch = "strict"
        elif comparable(a, b, thr):
            branch = "comparable"
    return RelationResult(
        name=name,
        holds=branch != "neither",
        branch=branch if branch != "neither" else None,
        values={labels[0]: a, labels[1]: b, labels[2]: c},
    )


def check_relations(report: SimilarityReport, thr: RelationThresholds = DEFAULT_THRESHOLDS) -> list[RelationResult]:
    """Evaluate the author-boundary and imitation-ordering relations for one model."""
    total = report.total_mass
    if report.scheme == 4:
        boundary = report.pair(2, 3)
        ordering = _ordering_relation(
            "imitation_ordering",
            report.pair(1, 4),
            report.pair(3, 4),
            report.pair(1, 3),
            ("s(1,4)", "s(3,4)", "s(1,3)"),
            thr,
        )
        boundary_label = "s(2,3)"
    else:
        boundary = report.pair(3, 5)
        ordering = _ordering_relation(
            "imitation_ordering",
            report.pair(1, 7),
            report.pair(5, 7),
            report.pair(1, 5),
            ("s(1&2,7&8)", "s(5&6,7&8)", "s(1&2,5&6)"),
            thr,
        )
        boundary_label = "s(3&4,5&6)"
    results = [
        RelationResult(
            name="author_boundary_near_zero",
            holds=near_zero(boundary, total, thr),
            branch=None,
            values={boundary_label: boundary, "total_mass": total},
        ),
        ordering,
    ]
    return results


def similarity_report(
    matrix: ConfusionMatrix,
    model_id: str,
    thr: RelationThresholds = DEFAULT_THRESHOLDS,
) -> SimilarityReport:
    """Build the full pairwise report for one model's summed matrix.

    Provenance entries (run ids "<model>__<type>__<seed>") must all belong
    to `model_id`: similarity orderings across different models are not
    comparable and are refused here.
    """
    for run_id in matrix.provenance:
        if run_id.split("__")[0] != model_id:
            raise ValidationError(
                f"matrix provenance {run_id!r} is not a {model_id!r} run; "
                "similarities must not mix model types"
            )
    if matrix.n == 4:
        pairs = {
            (i, j): similarity4(matrix, i, j)
            for i in range(1, 5)
            for j in range(i + 1, 5)
        }
        scheme = 4
    elif matrix.n == 8:
        pairs = {
            (i, j): similarity8(matrix, i, j)
            for i in (1, 3, 5, 7)
            for j in (3, 5, 7)
            if i < j
        }
        scheme = 8
    else:
        raise ValidationError(f"no similarity scheme for n={matrix.n}")
    report = SimilarityReport(model_id=model_id, scheme=scheme, pairs=pairs)
    report.relations = check_relations(report, thr)
    return report


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def write_confusion_csv(path: str | Path, matrix: ConfusionMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + [str(c) for c in range(1, matrix.n + 1)])
        for i in range(1, matrix.n + 1):
            writer.writerow([str(i)] + [str(matrix.at(i, j)) for j in range(1, matrix.n + 1)])


def write_similarity_csv(path: str | Path, report: SimilarityReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair", "similarity"])
        for (i, j), value in sorted(report.pairs.items()):
            writer.writerow([f"({i},{j})", str(value)])
