"""Confusion-matrix based segmentation metrics: per-class IoU and Dice, mIoU, pixel accuracy.

Counts are kept as integers and every ratio is formed as an exact ``Fraction``
before conversion to float, so dataset-scale accumulation has no float drift.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DataError

NUM_CLASSES = 3
CLASS_NAMES = ("background", "bioink", "nozzle")


class ConfusionMatrix:
    """counts[g, p] = number of pixels with ground truth g predicted as p."""

    def __init__(self, num_classes: int = NUM_CLASSES, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.uint64)
        self.counts = np.asarray(counts, dtype=np.uint64)
        if self.counts.shape != (num_classes, num_classes):
            raise DataError(f"confusion matrix must be {num_classes}x{num_classes}, got {self.counts.shape}")

    def accumulate(self, pred, true) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise DataError(f"prediction shape {pred.shape} != ground truth shape {true.shape}")
        C = self.num_classes
        for name, m in (("prediction", pred), ("ground truth", true)):
            if m.size and (m.min() < 0 or m.max() >= C):
                raise DataError(f"{name} contains class ids outside [0, {C})")
        flat = true.astype(np.int64).ravel() * C + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=C * C).reshape(C, C).astype(np.uint64)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _stats(self):
        c = [[int(v) for v in row] for row in self.counts]
        C = self.num_classes
        tp = [c[k][k] for k in range(C)]
        gt = [sum(c[k]) for k in range(C)]  # TP + FN
        pr = [sum(c[g][k] for g in range(C)) for k in range(C)]  # TP + FP
        return tp, gt, pr


def accumulate(cm: ConfusionMatrix, pred, true) -> ConfusionMatrix:
    return cm.accumulate(pred, true)


def _mean(values):
    present = [v for v in values if v is not None]
    if not present:
        return None
    return sum(present, Fraction(0)) / len(present)


def iou(cm: ConfusionMatrix):
    """Per-class IoU (None where the class is absent from both masks) and their mean."""
    tp, gt, pr = cm._stats()
    per_class = [Fraction(t, g + p - t) if g + p - t else None for t, g, p in zip(tp, gt, pr)]
    return per_class, _mean(per_class)


def dice(cm: ConfusionMatrix):
    tp, gt, pr = cm._stats()
    per_class = [Fraction(2 * t, g + p) if g + p else None for t, g, p in zip(tp, gt, pr)]
    return per_class, _mean(per_class)


def pixel_accuracy(cm: ConfusionMatrix) -> Fraction:
    total = cm.total
    if total == 0:
        raise DataError("pixel accuracy of an empty confusion matrix is undefined")
    return Fraction(int(np.trace(cm.counts)), total)


def _f(x):
    return float("nan") if x is None else float(x)


@dataclass
class EvalReport:
    iou: list[float]
    dice: list[float]
    miou: float
    mean_dice: float
    pixel_accuracy: float
    class_pixels: list[int]
    excluded_classes: list[int] = field(default_factory=list)
    model: str = "BioLite U-Net"

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, model: str = "BioLite U-Net") -> "EvalReport":
        ious, miou = iou(cm)
        dices, mdice = dice(cm)
        _, gt, _ = cm._stats()
        return cls(
            iou=[_f(v) for v in ious],
            dice=[_f(v) for v in dices],
            miou=_f(miou),
            mean_dice=_f(mdice),
            pixel_accuracy=float(pixel_accuracy(cm)),
            class_pixels=gt,
            excluded_classes=[k for k, v in enumerate(ious) if v is None],
            model=model,
        )

    def as_dict(self) -> dict:
        d = {"model": self.model, "miou": self.miou, "mean_dice": self.mean_dice, "pixel_accuracy": self.pixel_accuracy}
        for k, name in enumerate(CLASS_NAMES):
            d[f"iou_{name}"] = self.iou[k]
            d[f"dice_{name}"] = self.dice[k]
            d[f"pixels_{name}"] = self.class_pixels[k]
        d["excluded_classes"] = ",".join(CLASS_NAMES[k] for k in self.excluded_classes)
        return d

    def to_kv(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def csv_header(self) -> list[str]:
        return list(self.as_dict())

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.csv_header(), lineterminator="\n")
        if header:
            writer.writeheader()
        writer.writerow(self.as_dict())
        return buf.getvalue()


def _column_means(rows):
    """Per-class mean over images, ignoring NaN (absent) entries; NaN if absent everywhere."""
    cols = np.asarray(rows, dtype=np.float64).T
    return [float(c[~np.isnan(c)].mean()) if (~np.isnan(c)).any() else float("nan") for c in cols]


def evaluate(preds, trues, per_image: bool = False, num_classes: int = NUM_CLASSES):
    """Dataset-level report from a confusion matrix summed over all pairs.

    With ``per_image=True`` metrics are computed per pair and averaged instead.
    """
    pairs = list(zip(preds, trues))
    if not pairs:
        raise DataError("nothing to evaluate")
    if not per_image:
        cm = ConfusionMatrix(num_classes)
        for p, t in pairs:
            cm.accumulate(p, t)
        return EvalReport.from_confusion(cm)
    reports = [EvalReport.from_confusion(ConfusionMatrix(num_classes).accumulate(p, t)) for p, t in pairs]
    return EvalReport(
        iou=_column_means([r.iou for r in reports]),
        dice=_column_means([r.dice for r in reports]),
        miou=float(np.mean([r.miou for r in reports])),
        mean_dice=float(np.mean([r.mean_dice for r in reports])),
        pixel_accuracy=float(np.mean([r.pixel_accuracy for r in reports])),
        class_pixels=[int(v) for v in np.sum([r.class_pixels for r in reports], axis=0)],
    )
