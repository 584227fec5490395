"""Part-segmentation metrics: per-shape IoU, dataset mIoU, class-mean accuracy.

Means are accumulated left to right in Python floats so results do not
depend on numpy's summation strategy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass
class ConfusionCounts:
    parts: tuple[int, ...]
    intersection: tuple[int, ...]
    union: tuple[int, ...]
    support: tuple[int, ...]

    def ious(self) -> list[float]:
        # a part absent from both prediction and ground truth scores 1
        return [1.0 if u == 0 else i / u for i, u in zip(self.intersection, self.union)]


def _labels(true_labels, pred_labels):
    t = np.asarray(true_labels).reshape(-1)
    p = np.asarray(pred_labels).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"label length mismatch: {t.size} true vs {p.size} predicted")
    return t, p


def _mean(values: Iterable[float]) -> float:
    total, n = 0.0, 0
    for v in values:
        total += v
        n += 1
    return total / n


def confusion_counts(true_labels, pred_labels, parts: Iterable[int]) -> ConfusionCounts:
    t, p = _labels(true_labels, pred_labels)
    parts = tuple(sorted(int(k) for k in parts))
    inter, union, support = [], [], []
    for k in parts:
        in_t, in_p = t == k, p == k
        inter.append(int(np.count_nonzero(in_t & in_p)))
        union.append(int(np.count_nonzero(in_t | in_p)))
        support.append(int(np.count_nonzero(in_t)))
    return ConfusionCounts(parts, tuple(inter), tuple(union), tuple(support))


def shape_iou(true_labels, pred_labels, parts_of_shape: Iterable[int]) -> float:
    """Mean over ``parts_of_shape`` of each part's intersection over union."""
    counts = confusion_counts(true_labels, pred_labels, parts_of_shape)
    if not counts.parts:
        raise ValueError("parts_of_shape must not be empty")
    return _mean(counts.ious())


def dataset_miou(per_shape_ious: Sequence[float]) -> float:
    if len(per_shape_ious) == 0:
        raise ValueError("dataset_miou needs at least one shape")
    return _mean(float(v) for v in per_shape_ious)


def per_class_recall(true_labels, pred_labels, num_classes: int) -> dict[int, float]:
    """Recall of every class that occurs in the ground truth."""
    t, p = _labels(true_labels, pred_labels)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes):
        raise ValueError(f"labels must be < {num_classes}")
    recalls = {}
    for k in range(num_classes):
        in_t = t == k
        n = int(np.count_nonzero(in_t))
        if n:
            recalls[k] = int(np.count_nonzero(in_t & (p == k))) / n
    return recalls


def mean_accuracy(true_labels, pred_labels, num_classes: int) -> float:
    """Macro recall: classes missing from the ground truth are skipped."""
    recalls = per_class_recall(true_labels, pred_labels, num_classes)
    if not recalls:
        raise ValueError("mean_accuracy needs at least one labelled point")
    return _mean(recalls.values())


def overall_accuracy(true_labels, pred_labels) -> float:
    t, p = _labels(true_labels, pred_labels)
    return int(np.count_nonzero(t == p)) / t.size
