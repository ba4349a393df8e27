"""Label aggregation and the benchmark metric suite.

Labels aggregate upward by an any-of rule: a segment is hallucinatory iff
any of its claims is, a response iff any of its segments is. Detection
quality is scored per class (hallucinatory / non-hallucinatory) with
precision, recall, and F1, plus accuracy and the unweighted per-class
averages; macro-F1 is the mean of the two class F1 scores.

Any 0/0 ratio is 0 by convention, and the convention is recorded on the
report so downstream comparisons are explicit about it. Percentages render
with two decimals, rounding halves away from zero.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from fractions import Fraction
from typing import Any, Mapping, Sequence

from .errors import (
    DegenerateMarginals,
    EmptyResponse,
    EmptySegment,
    InvalidMatrix,
    LengthMismatch,
    MissingCategoryTags,
)
from .model import HallucinationCategory, Label

ZERO_DIVISION_CONVENTION = "0/0 -> 0"


class MetricLevel(Enum):
    CLAIM = "claim"
    SEGMENT = "segment"
    RESPONSE = "response"


def derive_segment_label(claim_labels: Sequence[Label]) -> Label:
    """A segment is hallucinatory iff it contains any hallucinatory claim."""
    if not claim_labels:
        raise EmptySegment("segment has no claim labels")
    if any(label is Label.HALLUCINATORY for label in claim_labels):
        return Label.HALLUCINATORY
    return Label.NON_HALLUCINATORY


def derive_response_label(segment_labels: Sequence[Label]) -> Label:
    """A response is hallucinatory iff it contains any hallucinatory segment."""
    if not segment_labels:
        raise EmptyResponse("response has no segment labels")
    if any(label is Label.HALLUCINATORY for label in segment_labels):
        return Label.HALLUCINATORY
    return Label.NON_HALLUCINATORY


# --- confusion counting -------------------------------------------------------


@dataclass(frozen=True)
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")


@dataclass(frozen=True)
class ConfusionCounts:
    hallucinatory: ClassCounts
    non_hallucinatory: ClassCounts
    total: int


def count_confusion(preds: Sequence[Label], golds: Sequence[Label]) -> ConfusionCounts:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise LengthMismatch("empty label vectors")
    counts = {label: {"tp": 0, "fp": 0, "fn": 0} for label in Label}
    for pred, gold in zip(preds, golds):
        if pred is gold:
            counts[pred]["tp"] += 1
        else:
            counts[pred]["fp"] += 1
            counts[gold]["fn"] += 1
    return ConfusionCounts(
        hallucinatory=ClassCounts(**counts[Label.HALLUCINATORY]),
        non_hallucinatory=ClassCounts(**counts[Label.NON_HALLUCINATORY]),
        total=len(preds),
    )


@dataclass(frozen=True)
class PRF1:
    precision: float
    recall: float
    f1: float


def prf1(counts: ClassCounts) -> PRF1:
    """Precision, recall, F1 for one class; all 0/0 cases resolve to 0."""
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRF1(precision=precision, recall=recall, f1=f1)


@dataclass(frozen=True)
class MetricsReport:
    """The full score sheet at one granularity; values are fractions in [0, 1]."""

    level: MetricLevel
    hallucinatory: PRF1
    non_hallucinatory: PRF1
    accuracy: float
    avg_precision: float
    avg_recall: float
    macro_f1: float
    total: int
    unverified_count: int = 0
    zero_division: str = ZERO_DIVISION_CONVENTION

    def to_json(self) -> dict[str, Any]:
        def cls(scores: PRF1) -> dict[str, float]:
            return {
                "precision": percent_value(scores.precision),
                "recall": percent_value(scores.recall),
                "f1": percent_value(scores.f1),
            }

        return {
            "level": self.level.value,
            "hallucinatory": cls(self.hallucinatory),
            "non_hallucinatory": cls(self.non_hallucinatory),
            "accuracy": percent_value(self.accuracy),
            "avg_precision": percent_value(self.avg_precision),
            "avg_recall": percent_value(self.avg_recall),
            "macro_f1": percent_value(self.macro_f1),
            "total": self.total,
            "unverified_count": self.unverified_count,
            "zero_division": self.zero_division,
        }


def report(
    preds: Sequence[Label],
    golds: Sequence[Label],
    level: MetricLevel = MetricLevel.CLAIM,
    unverified_count: int = 0,
) -> MetricsReport:
    """Score aligned prediction/gold vectors at one granularity."""
    confusion = count_confusion(preds, golds)
    h = prf1(confusion.hallucinatory)
    nh = prf1(confusion.non_hallucinatory)
    matches = confusion.hallucinatory.tp + confusion.non_hallucinatory.tp
    return MetricsReport(
        level=level,
        hallucinatory=h,
        non_hallucinatory=nh,
        accuracy=matches / confusion.total,
        avg_precision=(h.precision + nh.precision) / 2,
        avg_recall=(h.recall + nh.recall) / 2,
        macro_f1=(h.f1 + nh.f1) / 2,
        total=confusion.total,
        unverified_count=unverified_count,
    )


# --- inter-annotator agreement ----------------------------------------------------


@dataclass(frozen=True)
class RatingsMatrix:
    """Items x categories table of annotator counts; constant raters per row."""

    rows: tuple[tuple[int, ...], ...]

    @classmethod
    def from_lists(cls, rows: Sequence[Sequence[int]]) -> "RatingsMatrix":
        return cls(rows=tuple(tuple(int(cell) for cell in row) for row in rows))

    @property
    def n_raters(self) -> int:
        return sum(self.rows[0])

    def validate(self) -> None:
        if not self.rows:
            raise InvalidMatrix("matrix has no rows")
        widths = {len(row) for row in self.rows}
        if len(widths) != 1 or 0 in widths:
            raise InvalidMatrix("rows must share one non-zero category count")
        if any(cell < 0 for row in self.rows for cell in row):
            raise InvalidMatrix("cell counts must be non-negative")
        n = self.n_raters
        if n < 2:
            raise InvalidMatrix(f"need at least 2 raters, got {n}")
        unequal = [i for i, row in enumerate(self.rows) if sum(row) != n]
        if unequal:
            raise InvalidMatrix(f"rows {unequal} do not sum to {n} raters")


def fleiss_kappa(matrix: RatingsMatrix) -> float:
    """Chance-corrected multi-rater agreement.

    Observed agreement averages, per item, the fraction of rater pairs that
    agree; expected agreement is the sum of squared category marginals.
    Exact rational arithmetic keeps unanimity at exactly 1.0 and the
    degenerate-marginals check sound.
    """
    matrix.validate()
    if len(matrix.rows) < 2:
        raise InvalidMatrix("need at least 2 items")
    n = matrix.n_raters
    n_items = len(matrix.rows)
    n_categories = len(matrix.rows[0])

    per_item = [
        Fraction(sum(cell * cell for cell in row) - n, n * (n - 1))
        for row in matrix.rows
    ]
    observed = Fraction(sum(per_item), n_items)
    marginals = [
        Fraction(sum(row[j] for row in matrix.rows), n_items * n)
        for j in range(n_categories)
    ]
    expected = sum(p * p for p in marginals)

    if observed == 1:
        return 1.0
    if expected == 1:
        raise DegenerateMarginals(
            "all ratings fall in one category yet items disagree"
        )
    return float((observed - expected) / (1 - expected))


# --- per-category analysis -----------------------------------------------------------


def per_category_recall(
    preds: Sequence[Label],
    golds: Sequence[Label],
    categories: Sequence[frozenset[HallucinationCategory] | None],
) -> dict[HallucinationCategory, float]:
    """Recall over gold-hallucinatory claims, split by category tag.

    A claim counts toward every category it carries (once per category).
    Only categories that actually occur appear in the result.
    """
    if not len(preds) == len(golds) == len(categories):
        raise LengthMismatch("preds, golds, categories must align")
    detected: dict[HallucinationCategory, int] = {}
    tagged: dict[HallucinationCategory, int] = {}
    for pred, gold, tags in zip(preds, golds, categories):
        if gold is not Label.HALLUCINATORY:
            continue
        if not tags:
            raise MissingCategoryTags("gold-hallucinatory claim without category tags")
        for tag in tags:
            tagged[tag] = tagged.get(tag, 0) + 1
            if pred is Label.HALLUCINATORY:
                detected[tag] = detected.get(tag, 0) + 1
    return {
        category: detected.get(category, 0) / count
        for category, count in tagged.items()
    }


# --- rendering ------------------------------------------------------------------------


def format_percent(value: float) -> str:
    """Two-decimal percentage, halves rounded away from zero."""
    return str(Decimal(repr(value * 100)).quantize(Decimal("0.01"), ROUND_HALF_UP))


def percent_value(value: float) -> float:
    return float(format_percent(value))


_TABLE_COLUMNS = [
    "Level", "H-P", "H-R", "H-F1", "NH-P", "NH-R", "NH-F1",
    "Acc.", "Avg.P", "Avg.R", "Mac.F1",
]


def _table_row(rep: MetricsReport) -> list[str]:
    return [
        rep.level.value,
        format_percent(rep.hallucinatory.precision),
        format_percent(rep.hallucinatory.recall),
        format_percent(rep.hallucinatory.f1),
        format_percent(rep.non_hallucinatory.precision),
        format_percent(rep.non_hallucinatory.recall),
        format_percent(rep.non_hallucinatory.f1),
        format_percent(rep.accuracy),
        format_percent(rep.avg_precision),
        format_percent(rep.avg_recall),
        format_percent(rep.macro_f1),
    ]


def render_table(reports: Sequence[MetricsReport]) -> str:
    """Aligned text table: per-class P/R/F1, then the averaged columns."""
    rows = [_TABLE_COLUMNS] + [_table_row(rep) for rep in reports]
    widths = [max(len(row[i]) for row in rows) for i in range(len(_TABLE_COLUMNS))]
    lines = []
    for index, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])]
        cells += [cell.rjust(width) for cell, width in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if index == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines)


def render_json(
    reports: Sequence[MetricsReport],
    category_recall: Mapping[HallucinationCategory, float] | None = None,
) -> str:
    payload: dict[str, Any] = {"reports": [rep.to_json() for rep in reports]}
    if category_recall is not None:
        payload["category_recall"] = {
            category.value: percent_value(value)
            for category, value in sorted(category_recall.items(), key=lambda kv: kv[0].value)
        }
    return json.dumps(payload, indent=2, sort_keys=True)


def render_csv(reports: Sequence[MetricsReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([
        "level", "h_precision", "h_recall", "h_f1",
        "nh_precision", "nh_recall", "nh_f1",
        "accuracy", "avg_precision", "avg_recall", "macro_f1",
        "total", "unverified_count",
    ])
    for rep in reports:
        writer.writerow(_table_row(rep)[:11] + [rep.total, rep.unverified_count])
    return buffer.getvalue()
