"""Segmentation metrics: Dice, Jaccard, accuracy, sensitivity, specificity.

Per-image values are averaged arithmetically. When a ratio's denominator is
zero, the value is 1 if the sets it compares are both empty and 0 otherwise.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Sequence

import numpy as np

METRIC_NAMES = ("dice", "jaccard", "accuracy", "sensitivity", "specificity")


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class ImageMetrics(NamedTuple):
    dice: float
    jaccard: float
    accuracy: float
    sensitivity: float
    specificity: float


def confusion_counts(pred_mask, gt_mask) -> ConfusionCounts:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num, den, both_empty):
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def metrics_from_counts(c: ConfusionCounts) -> ImageMetrics:
    tp, fp, tn, fn = c
    if c.total == 0:
        raise ValueError("empty confusion counts")
    dice = _ratio(2 * tp, 2 * tp + fp + fn, True)
    jaccard = _ratio(tp, tp + fp + fn, True)
    accuracy = (tp + tn) / c.total
    # no positives in the ground truth: perfect iff the prediction has none either
    sensitivity = _ratio(tp, tp + fn, fp == 0)
    specificity = _ratio(tn, tn + fp, fn == 0)
    return ImageMetrics(dice, jaccard, accuracy, sensitivity, specificity)


@dataclass
class MetricsReport:
    ids: List[str] = field(default_factory=list)
    per_image: List[ImageMetrics] = field(default_factory=list)

    def add(self, sample_id: str, m: ImageMetrics):
        self.ids.append(sample_id)
        self.per_image.append(m)

    def aggregate(self) -> ImageMetrics:
        if not self.per_image:
            raise ValueError("no images in report")
        arr = np.array(self.per_image, dtype=np.float64)
        return ImageMetrics(*(float(v) for v in arr.mean(axis=0)))

    def __getattr__(self, name):
        if name in METRIC_NAMES:
            return getattr(self.aggregate(), name)
        raise AttributeError(name)

    def rows(self):
        for sid, m in zip(self.ids, self.per_image):
            yield [sid, *m]
        yield ["aggregate", *self.aggregate()]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", *METRIC_NAMES])
            for row in self.rows():
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def read_metrics_csv(path):
    """Return ``{id: ImageMetrics}`` from a file written by :meth:`MetricsReport.write_csv`."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["id"]] = ImageMetrics(*(float(row[k]) for k in METRIC_NAMES))
    return out


def foreground_mask(probs, threshold=0.5):
    """Binarize an (n, classes, h, w) probability map to (n, h, w) lesion masks.

    Two classes: foreground channel > threshold. Three classes: any
    non-background class wins the argmax.
    """
    if probs.shape[1] == 2:
        return probs[:, 1] > threshold
    return probs.argmax(axis=1) != 0


def label_mask(labels):
    return labels[:, 0] < 0.5


def evaluate_dataset(model: Callable, samples: Sequence, threshold=0.5, batch_size=4) -> MetricsReport:
    """Run ``model`` (images -> probabilities) over ``samples`` and score each image."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    report = MetricsReport()
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        labels = np.stack([s.label for s in chunk])
        probs = model(images)
        pred = foreground_mask(probs, threshold)
        gt = label_mask(labels)
        for s, pm, gm in zip(chunk, pred, gt):
            report.add(s.id, metrics_from_counts(confusion_counts(pm, gm)))
    return report
