"""Confusion accounting for paired clean/attacked evaluation.

Scoring treats a raised flag on an attacked row as a true positive even
though the detector abstains from classifying, and an attacked row that
still lands on its true class also counts as a true positive (the attack
failed). Ratios with zero denominators are reported as None, never 0; the
text layer renders them "n/a".
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

from .classifier import DetectionOutcome, HeadSelection, PrototypeSet, detect
from .core import EmbeddingDataset
from .metrics import L0Params

__all__ = [
    "ConfusionCounts",
    "MetricReport",
    "Score",
    "aggregate",
    "evaluate_split",
    "score_sample",
]


class Score(str, Enum):
    TP = "TP"
    TN = "TN"
    FP = "FP"
    FN = "FN"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricReport:
    """Aggregate metrics; a None metric means its denominator was zero."""

    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    counts: ConfusionCounts


def score_sample(truth: tuple[bool, int], outcome: DetectionOutcome) -> Score:
    """Map one (attacked flag, true label) / outcome pair to its confusion cell."""
    attacked, label = bool(truth[0]), int(truth[1])
    if outcome.attack_flag:
        return Score.TP if attacked else Score.FP
    correct = outcome.predicted_class == label
    if attacked:
        return Score.TP if correct else Score.FN
    return Score.TN if correct else Score.FP


def aggregate(rows) -> MetricReport:
    """Fold scored rows into counts and the four ratio metrics."""
    tally = {cell: 0 for cell in Score}
    for row in rows:
        tally[Score(row)] += 1
    counts = ConfusionCounts(tp=tally[Score.TP], tn=tally[Score.TN],
                             fp=tally[Score.FP], fn=tally[Score.FN])

    def ratio(num: int, den: int) -> float | None:
        return num / den if den > 0 else None

    accuracy = ratio(counts.tp + counts.tn, counts.n)
    precision = ratio(counts.tp, counts.tp + counts.fp)
    recall = ratio(counts.tp, counts.tp + counts.fn)
    if precision is None or recall is None or precision + recall == 0.0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return MetricReport(accuracy=accuracy, precision=precision, recall=recall,
                        f1=f1, counts=counts)


def evaluate_split(
    dataset: EmbeddingDataset,
    protos: PrototypeSet,
    heads: HeadSelection,
    params: L0Params,
    compliance: Mapping[str, bool] | None = None,
) -> dict[str, MetricReport | None]:
    """Overall plus compliant/non-compliant sub-reports.

    ``compliance`` maps a sample id to its compliance verdict; both twins of
    an id (clean and attacked rows share it) land in the same subset, so a
    subset of s ids contributes 2s rows. Rows whose id has no verdict count
    only toward the overall report. A subset with no rows reports None.
    """
    compliance = compliance or {}
    scored_all, scored_true, scored_false = [], [], []
    for row in dataset:
        outcome = detect(row.embedding, protos, heads, params)
        cell = score_sample((row.attacked, row.label), outcome)
        scored_all.append(cell)
        verdict = compliance.get(row.id)
        if verdict is True:
            scored_true.append(cell)
        elif verdict is False:
            scored_false.append(cell)
    return {
        "overall": aggregate(scored_all),
        "compliant": aggregate(scored_true) if scored_true else None,
        "non_compliant": aggregate(scored_false) if scored_false else None,
    }
