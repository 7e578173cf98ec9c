"""Pixelwise confusion accounting and the epsilon-corrected scores.

The four scores are defined as:

    accuracy  = (TP + TN) / (TP + TN + FP + FN)
    precision = (TP + 1e-9) / (TP + FP + 1e-9)
    recall    = (TP + 1e-9) / (TP + FN + 1e-9)
    f1        = (TP + 1e-9) / ((TP + 1e-9) + (FP + FN) / 2)

The 1e-9 correction appears in the numerator and denominator of
precision/recall/f1 so a class that is absent and never predicted
(TP = FP = FN = 0) scores exactly 1.0 instead of dividing by zero.
Accuracy keeps its uncorrected form; an empty evaluation region is an
error. All arithmetic runs at 64-bit precision.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import autodiff as ad
from .data import ClassMap, LabelMask, SamplePair, downscale_pair
from .volume import predict_labels

__all__ = [
    "EPSILON",
    "ConfusionCounts",
    "MetricRow",
    "MetricsReport",
    "confusion",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "score_counts",
    "evaluate",
    "METRICS_CSV_HEADER",
]

EPSILON = 1e-9

METRICS_CSV_HEADER = ["image", "class_index", "class_name", "tp", "fp", "tn", "fn",
                      "accuracy", "precision", "recall", "f1"]


@dataclass(frozen=True)
class ConfusionCounts:
    """One-vs-rest pixel tallies for a single class."""

    tp: int
    fp: int
    tn: int
    fn: int
    class_index: int = 0
    epsilon: float = EPSILON

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.class_index != self.class_index:
            raise ValueError("cannot pool counts across classes")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn,
                               self.class_index, self.epsilon)


def confusion(pred: LabelMask, truth: LabelMask, class_index: int) -> ConfusionCounts:
    """Binarize both masks against ``class_index`` and tally TP/FP/TN/FN."""
    if pred.labels.shape != truth.labels.shape:
        raise ValueError(f"prediction {pred.labels.shape} does not match "
                         f"truth {truth.labels.shape}")
    p = pred.labels == class_index
    t = truth.labels == class_index
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn, class_index)


def accuracy(cc: ConfusionCounts) -> float:
    if cc.total == 0:
        raise ValueError("accuracy undefined on zero pixels")
    return (cc.tp + cc.tn) / cc.total


def precision(cc: ConfusionCounts) -> float:
    return (cc.tp + cc.epsilon) / (cc.tp + cc.fp + cc.epsilon)


def recall(cc: ConfusionCounts) -> float:
    return (cc.tp + cc.epsilon) / (cc.tp + cc.fn + cc.epsilon)


def f1(cc: ConfusionCounts) -> float:
    return (cc.tp + cc.epsilon) / ((cc.tp + cc.epsilon) + 0.5 * (cc.fp + cc.fn))


@dataclass
class MetricRow:
    image: str
    class_index: int
    class_name: str
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float


def score_counts(image_id: str, cc: ConfusionCounts, class_name: str) -> MetricRow:
    return MetricRow(image_id, cc.class_index, class_name, cc.tp, cc.fp, cc.tn, cc.fn,
                     accuracy(cc), precision(cc), recall(cc), f1(cc))


@dataclass
class MetricsReport:
    """Per-image rows followed by pooled "ALL" rows (counts summed first,
    then scored)."""

    rows: list[MetricRow]

    def per_image(self) -> list[MetricRow]:
        return [r for r in self.rows if r.image != "ALL"]

    def pooled(self) -> list[MetricRow]:
        return [r for r in self.rows if r.image == "ALL"]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_CSV_HEADER)
            for r in self.rows:
                w.writerow(_row_fields(r))


def _row_fields(r: MetricRow) -> list:
    return [r.image, r.class_index, r.class_name, r.tp, r.fp, r.tn, r.fn,
            repr(r.accuracy), repr(r.precision), repr(r.recall), repr(r.f1)]


def evaluate(model, pairs: list[SamplePair], cmap: ClassMap,
             scale_factor: float = 1.0, jobs: int = 1) -> MetricsReport:
    """Score a model on annotated pairs: per-image rows for every class plus
    pooled rows computed from the summed confusion counts."""
    if not pairs:
        raise ValueError("no test pairs to evaluate")
    if model.spec.num_classes != cmap.num_classes:
        raise ValueError(f"model has {model.spec.num_classes} classes but class map "
                         f"has {cmap.num_classes}")
    model.eval()
    num_classes = cmap.num_classes

    def one(pair: SamplePair) -> list[ConfusionCounts]:
        scaled = downscale_pair(pair, scale_factor)
        pred = predict_labels(model, scaled.image)
        return [confusion(pred, scaled.mask, c) for c in range(num_classes)]

    with ad.no_grad():
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                counted = list(pool.map(one, pairs))
        else:
            counted = [one(p) for p in pairs]

    rows: list[MetricRow] = []
    for pair, counts in zip(pairs, counted):
        for cc in counts:
            rows.append(score_counts(pair.id, cc, cmap.name_of(cc.class_index)))
    for c in range(num_classes):
        pooled = ConfusionCounts(0, 0, 0, 0, c)
        for counts in counted:
            pooled = pooled + counts[c]
        rows.append(score_counts("ALL", pooled, cmap.name_of(c)))
    return MetricsReport(rows)
