"""Pose and classification metrics.

MPJPE is the mean over samples of the per-sample mean Euclidean joint
distance, reported in millimeters. No alignment (Procrustes or
root-centering) is applied.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EvalReport:
    overall_mpjpe: float
    per_class_mpjpe: dict = field(default_factory=dict)  # class id -> mm
    accuracy: float = float("nan")
    class_counts: dict = field(default_factory=dict)
    class_names: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "overall_mpjpe": self.overall_mpjpe,
            "per_class_mpjpe": {str(k): v for k, v in self.per_class_mpjpe.items()},
            "accuracy": self.accuracy,
            "class_counts": {str(k): v for k, v in self.class_counts.items()},
        }, indent=2, sort_keys=True)

    def write_csv(self, path):
        """One column per class plus an Avg column."""
        classes = sorted(self.per_class_mpjpe)
        names = [self.class_names.get(c, f"class_{c}") for c in classes]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(names + ["Avg"])
            writer.writerow([f"{self.per_class_mpjpe[c]:.6f}" for c in classes]
                            + [f"{self.overall_mpjpe:.6f}"])


def mpjpe(predicted, target):
    """Mean per-joint position error between [N, 17, 3] batches, in mm."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"pose shapes differ: {predicted.shape} vs {target.shape}")
    if predicted.ndim != 3 or predicted.shape[1:] != (17, 3):
        raise ValueError(f"expected [N, 17, 3] poses, got {predicted.shape}")
    dist = np.sqrt(((predicted - target) ** 2).sum(axis=2))
    return float(dist.mean(axis=1).mean())


def mpjpe_per_class(predictions, targets, labels, class_names=None):
    """Group MPJPE by label; the overall value is the sample-weighted mean
    of the per-class values. Classes with no samples are absent."""
    labels = np.asarray(labels)
    report = EvalReport(overall_mpjpe=mpjpe(predictions, targets))
    for c in sorted(set(labels.tolist())):
        mask = labels == c
        report.per_class_mpjpe[c] = mpjpe(np.asarray(predictions)[mask],
                                          np.asarray(targets)[mask])
        report.class_counts[c] = int(mask.sum())
    if class_names:
        report.class_names = dict(class_names)
    return report


def accuracy(logits, labels):
    """Fraction of argmax matches; ties break toward the lower class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0]:
        raise ValueError(f"batch sizes differ: {logits.shape[0]} vs {labels.shape[0]}")
    preds = logits.argmax(axis=1)  # numpy argmax returns the first maximum
    return float((preds == labels).mean())
