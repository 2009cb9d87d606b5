"""Confusion matrices and macro-averaged one-vs-rest metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

COLUMNS = ("ACC", "P", "R", "S", "F1")


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray  # rows: true, columns: predicted

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.labels)
        if counts.shape != (n, n):
            raise ValueError(f"counts must be {n}x{n}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("negative count in confusion matrix")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassScores:
    precision: float
    recall: float
    specificity: float
    f1: float


@dataclass
class MetricReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_specificity: float
    macro_f1: float
    per_class: dict[str, ClassScores]
    warnings: list[str] = field(default_factory=list)

    def row(self) -> tuple[float, ...]:
        return (self.accuracy, self.macro_precision, self.macro_recall, self.macro_specificity, self.macro_f1)

    def to_json(self, cm: ConfusionMatrix | None = None) -> str:
        data = asdict(self)
        if cm is not None:
            data["confusion"] = {"labels": list(cm.labels), "counts": cm.counts.tolist()}
        return json.dumps(data, indent=2)

    def to_text(self, title: str = "") -> str:
        name_w = max([len("macro"), len(title)] + [len(c) for c in self.per_class])
        head = f"{title:<{name_w}}  " + "  ".join(f"{c:>6}" for c in COLUMNS)
        lines = [head, "-" * len(head)]
        for label, sc in self.per_class.items():
            cells = ["", f"{sc.precision:.4f}", f"{sc.recall:.4f}", f"{sc.specificity:.4f}", f"{sc.f1:.4f}"]
            lines.append(f"{label:<{name_w}}  " + "  ".join(f"{c:>6}" for c in cells))
        lines.append(f"{'macro':<{name_w}}  " + "  ".join(f"{v:.4f}" for v in self.row()))
        return "\n".join(lines) + "\n"


def confusion(truths: Sequence[str], preds: Sequence[str], labels: Sequence[str]) -> ConfusionMatrix:
    if len(truths) != len(preds):
        raise ValueError(f"{len(truths)} truths but {len(preds)} predictions")
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(truths, preds):
        for lab in (t, p):
            if lab not in index:
                raise ValueError(f"unknown label {lab!r}")
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(tuple(labels), counts)


def _ratio(num: float, den: float, what: str, warnings: list[str]) -> float:
    if den == 0:
        warnings.append(f"{what} is 0/0, reported as 0")
        return 0.0
    return num / den


def compute_metrics(cm: ConfusionMatrix) -> MetricReport:
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    c = cm.counts
    warnings: list[str] = []
    per_class = {}
    for i, label in enumerate(cm.labels):
        tp = c[i, i]
        fp = c[:, i].sum() - tp
        fn = c[i, :].sum() - tp
        tn = total - tp - fp - fn
        p = _ratio(tp, tp + fp, f"precision of {label}", warnings)
        r = _ratio(tp, tp + fn, f"recall of {label}", warnings)
        s = _ratio(tn, tn + fp, f"specificity of {label}", warnings)
        f1 = _ratio(2 * p * r, p + r, f"F1 of {label}", warnings)
        per_class[label] = ClassScores(float(p), float(r), float(s), float(f1))
    scores = list(per_class.values())
    return MetricReport(
        accuracy=float(np.trace(c) / total),
        macro_precision=float(np.mean([x.precision for x in scores])),
        macro_recall=float(np.mean([x.recall for x in scores])),
        macro_specificity=float(np.mean([x.specificity for x in scores])),
        macro_f1=float(np.mean([x.f1 for x in scores])),
        per_class=per_class,
        warnings=warnings,
    )
