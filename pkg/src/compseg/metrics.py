"""Per-image AC / DI / JA / SE and their aggregation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

METRICS = ("AC", "DI", "JA", "SE")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    @property
    def dice(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0 if self.fp == 0 else 0.0
        return 2 * self.tp / (2 * self.tp + self.fp + self.fn)

    @property
    def jaccard(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0 if self.fp == 0 else 0.0
        return self.tp / (self.tp + self.fp + self.fn)

    @property
    def sensitivity(self) -> float:
        if self.tp + self.fn == 0:
            return 1.0
        return self.tp / (self.tp + self.fn)

    def as_dict(self) -> dict[str, float]:
        return {"AC": self.accuracy, "DI": self.dice, "JA": self.jaccard, "SE": self.sensitivity}


def _binary(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{what} must be binary (0/1)")
    return a.astype(bool)


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> Confusion:
    pred = _binary(pred_mask, "pred_mask")
    gt = _binary(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = pred.size - tp - fp - fn
    return Confusion(tp, fp, tn, fn)


def image_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray) -> dict[str, float]:
    return confusion(pred_mask, gt_mask).as_dict()


@dataclass
class Summary:
    mean: dict[str, float]
    std: dict[str, float]
    count: int


def aggregate(per_image: Sequence[dict[str, float]], keys: Iterable[str] = METRICS) -> Summary:
    """Mean and (population) standard deviation of per-image metrics."""
    if not per_image:
        raise ValueError("aggregate needs at least one image")
    keys = list(keys)
    arr = np.array([[m[k] for k in keys] for m in per_image], dtype=np.float64)
    return Summary(dict(zip(keys, arr.mean(axis=0))), dict(zip(keys, arr.std(axis=0))), len(per_image))


def aggregate_folds(fold_means: Sequence[dict[str, float]], keys: Iterable[str] = METRICS) -> Summary:
    """Mean +- std across cross-validation folds (one summary per fold)."""
    return aggregate(fold_means, keys)


def hole_false_negative_rate(pred_mask: np.ndarray, hole_mask: np.ndarray) -> float | None:
    """Fraction of hole pixels (lesion by construction) predicted as background."""
    hole = np.asarray(hole_mask).astype(bool)
    total = int(hole.sum())
    if total == 0:
        return None
    missed = int(np.count_nonzero(hole & ~np.asarray(pred_mask).astype(bool)))
    return missed / total


def read_metrics_csv(path) -> tuple[list[dict[str, str]], list[dict[str, str]]]:
    """Split a metrics CSV into per-image rows and summary rows."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    per_image = [r for r in rows if r["id"] != "summary"]
    summary = [r for r in rows if r["id"] == "summary"]
    return per_image, summary
