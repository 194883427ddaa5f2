"""Evaluation metrics: per-class precision/recall/F1, macro averages,
payload-/flow-specific subset F1, confusion matrix."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .labels import PAYLOAD_SPECIFIC_CLASSES


@dataclass
class EvalReport:
    classes: list[str]
    per_class: dict[str, dict[str, float | None]]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    payload_specific_f1: float | None
    flow_specific_f1: float | None
    confusion: np.ndarray  # rows: true class, cols: predicted

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "per_class": self.per_class,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "payload_specific_f1": self.payload_specific_f1,
            "flow_specific_f1": self.flow_specific_f1,
            "confusion": self.confusion.tolist(),
        }


def evaluate(
    predictions: list[str],
    labels: list[str],
    classes: list[str] | None = None,
    payload_specific: frozenset[str] = PAYLOAD_SPECIFIC_CLASSES,
) -> EvalReport:
    """Macro-averaged multi-class metrics over the class list.

    Classes absent from ``labels`` get None metrics and are excluded from
    macro averages with a warning.
    """
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels must have equal length")
    if classes is None:
        classes = sorted(set(labels) | set(predictions))
    idx = {c: i for i, c in enumerate(classes)}
    y_true = np.array([idx[v] for v in labels])
    y_pred = np.array([idx[v] for v in predictions])

    k = len(classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1

    per_class: dict[str, dict[str, float | None]] = {}
    for c, i in idx.items():
        support = int(confusion[i].sum())
        if support == 0:
            warnings.warn(f"class {c!r} has no true samples; metrics undefined")
            per_class[c] = {"precision": None, "recall": None, "f1": None, "support": 0}
            continue
        tp = int(confusion[i, i])
        fp = int(confusion[:, i].sum()) - tp
        fn = support - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[c] = {"precision": precision, "recall": recall, "f1": f1, "support": support}

    defined = [c for c in classes if per_class[c]["f1"] is not None]

    def macro(metric: str, subset: list[str]) -> float | None:
        vals = [per_class[c][metric] for c in subset if per_class[c][metric] is not None]
        return float(np.mean(vals)) if vals else None

    payload_classes = [c for c in defined if c in payload_specific]
    flow_classes = [c for c in defined if c not in payload_specific]
    return EvalReport(
        classes=list(classes),
        per_class=per_class,
        macro_precision=macro("precision", defined) or 0.0,
        macro_recall=macro("recall", defined) or 0.0,
        macro_f1=macro("f1", defined) or 0.0,
        payload_specific_f1=macro("f1", payload_classes),
        flow_specific_f1=macro("f1", flow_classes),
        confusion=confusion,
    )
