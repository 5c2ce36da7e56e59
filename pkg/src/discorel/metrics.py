"""Accuracy and macro-F1 with multi-gold instances.

A prediction is correct when it matches any gold label. The confusion
matrix credits the matched gold as the reference class; a miss is charged
to the first listed gold. Macro-F1 averages per-class F1 over the FULL
label set, so classes never predicted and never referenced contribute 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import DataError


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class_f1: dict[str, float]
    confusion: dict[str, dict[str, int]]
    n_instances: int
    labels: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": self.per_class_f1,
            "confusion": self.confusion,
            "n_instances": self.n_instances,
            "labels": self.labels,
        }

    def to_markdown(self) -> str:
        lines = [
            f"n = {self.n_instances}",
            "",
            f"| metric | value |",
            f"|---|---|",
            f"| accuracy | {self.accuracy:.4f} |",
            f"| macro_f1 | {self.macro_f1:.4f} |",
            "",
            "| class | F1 |",
            "|---|---|",
        ]
        for lab in self.labels:
            lines.append(f"| {lab} | {self.per_class_f1[lab]:.4f} |")
        return "\n".join(lines) + "\n"


def _f1(tp: int, fp: int, fn: int) -> float:
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def score(
    predictions: Sequence[str],
    golds: Sequence[Sequence[str]],
    labels: Sequence[str],
) -> EvalReport:
    """Score predictions against (possibly multi-label) gold sets."""
    if len(predictions) != len(golds):
        raise DataError(
            f"{len(predictions)} predictions vs {len(golds)} gold sets"
        )
    labels = list(labels)
    label_set = set(labels)
    confusion = {r: {p: 0 for p in labels} for r in labels}
    hits = 0
    for pred, gold in zip(predictions, golds):
        gold = list(gold)
        if not gold:
            raise DataError("empty gold label set")
        if pred not in label_set or any(g not in label_set for g in gold):
            raise DataError(f"label outside the declared set: {pred!r} / {gold!r}")
        if pred in gold:
            hits += 1
            ref = pred
        else:
            ref = gold[0]
        confusion[ref][pred] += 1
    per_class = {}
    for lab in labels:
        tp = confusion[lab][lab]
        fp = sum(confusion[r][lab] for r in labels if r != lab)
        fn = sum(confusion[lab][p] for p in labels if p != lab)
        per_class[lab] = _f1(tp, fp, fn)
    macro = sum(per_class.values()) / len(labels)
    n = len(predictions)
    return EvalReport(
        accuracy=hits / n if n else 0.0,
        macro_f1=macro,
        per_class_f1=per_class,
        confusion=confusion,
        n_instances=n,
        labels=labels,
    )
