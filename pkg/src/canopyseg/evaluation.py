"""Pixel confusion metrics, threshold calibration and coverage-bucketed detection."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import _kernels
from .dataset import CATEGORIES, CoverageCategory, categorize, coverage
from .errors import ArgumentError, DataError, DegenerateError, ShapeError

DEFAULT_THRESHOLD = 0.85
DEFAULT_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))
DETECT_FRACTION = 0.10
ZERO_COVERAGE_FP_TOLERANCE = 40  # about 1% of a 64x64 patch


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self):
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def _check_threshold(threshold):
    if not 0 < threshold < 1:
        raise ArgumentError(f"threshold must be in (0, 1), got {threshold}")


def pixel_confusion(pred, target, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """A pixel is predicted positive iff pred >= threshold."""
    _check_threshold(threshold)
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    if pred.dtype not in (np.float32, np.float64):
        pred = pred.astype(np.float64)
    p = np.ascontiguousarray(pred).reshape(-1)
    t = np.ascontiguousarray(target != 0, dtype=np.uint8).reshape(-1)
    return ConfusionCounts(*_kernels.confusion_counts(p, t, float(threshold)))


def tp_rate(c: ConfusionCounts) -> float:
    """Sensitivity, tp / (tp + fn)."""
    if c.tp + c.fn == 0:
        raise DegenerateError("no positive pixels: tp_rate undefined")
    return c.tp / (c.tp + c.fn)


def tn_rate(c: ConfusionCounts) -> float:
    """Specificity, tn / (tn + fp)."""
    if c.tn + c.fp == 0:
        raise DegenerateError("no negative pixels: tn_rate undefined")
    return c.tn / (c.tn + c.fp)


def _rate_or_none(fn, c):
    try:
        return fn(c)
    except DegenerateError:
        return None


def pooled_confusion(preds, targets, threshold) -> ConfusionCounts:
    total = ConfusionCounts()
    for p, t in zip(preds, targets):
        total = total + pixel_confusion(p, t, threshold)
    return total


@dataclass
class ThresholdRow:
    threshold: float
    tp_rate: float
    tn_rate: float
    youden_j: float


@dataclass
class ThresholdReport:
    grid: list
    chosen_threshold: float

    def to_dict(self):
        return {
            "chosen_threshold": self.chosen_threshold,
            "grid": [
                {"threshold": r.threshold, "tp_rate": r.tp_rate, "tn_rate": r.tn_rate, "youden_j": r.youden_j}
                for r in self.grid
            ],
        }

    def to_text(self) -> str:
        lines = [f"{'threshold':>9}  {'TP rate':>8}  {'TN rate':>8}  {'J':>8}"]
        for r in self.grid:
            mark = "  <" if r.threshold == self.chosen_threshold else ""
            lines.append(f"{r.threshold:>9.2f}  {r.tp_rate:>8.4f}  {r.tn_rate:>8.4f}  {r.youden_j:>8.4f}{mark}")
        return "\n".join(lines) + "\n"


def calibrate_from_predictions(preds, targets, grid=DEFAULT_GRID) -> ThresholdReport:
    """Pick the grid threshold maximizing Youden's J on pooled pixel counts.

    Ties go to the lowest threshold.
    """
    preds, targets = list(preds), list(targets)
    if not preds:
        raise DataError("validation set is empty")
    rows = []
    best = None
    for thr in sorted(grid):
        c = pooled_confusion(preds, targets, thr)
        tpr, tnr = tp_rate(c), tn_rate(c)
        row = ThresholdRow(thr, tpr, tnr, tpr + tnr - 1.0)
        rows.append(row)
        if best is None or row.youden_j > best.youden_j:
            best = row
    return ThresholdReport(rows, best.threshold)


def calibrate_threshold(model, samples, grid=DEFAULT_GRID) -> ThresholdReport:
    from .model import predict

    samples = list(samples)
    if not samples:
        raise DataError("validation set is empty")
    preds = predict(model, np.stack([s.image for s in samples]))
    return calibrate_from_predictions(preds, [s.target for s in samples], grid)


def required_hits(coverage_px: int, fraction=DETECT_FRACTION) -> int:
    """ceil(fraction * coverage_px), computed exactly."""
    f = Fraction(str(fraction))
    return math.ceil(f * coverage_px)


@dataclass
class BucketRow:
    category: CoverageCategory
    count: int = 0
    detected: int = 0

    @property
    def rate(self):
        return self.detected / self.count if self.count else None


@dataclass
class BucketReport:
    rows: dict = field(default_factory=dict)  # CoverageCategory -> BucketRow
    threshold: float = DEFAULT_THRESHOLD

    @property
    def total(self) -> int:
        return sum(r.count for r in self.rows.values())

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "categories": [
                {"category": c.value, "coverage_percent": c.label, "patches": self.rows[c].count,
                 "detected": self.rows[c].detected, "detection_rate": self.rows[c].rate}
                for c in CATEGORIES
            ],
        }

    def to_text(self) -> str:
        head = f"{'Invasive coverage (%)':<34}" + "".join(f"{c.label:>9}" for c in CATEGORIES)
        cnt = f"{'Patches':<34}" + "".join(f"{self.rows[c].count:>9d}" for c in CATEGORIES)
        rate = f"{'Detected >= 10% of invasive (%)':<34}" + "".join(
            f"{'n/a':>9}" if self.rows[c].rate is None else f"{100 * self.rows[c].rate:>9.2f}" for c in CATEGORIES
        )
        return "\n".join([head, cnt, rate]) + "\n"


def patch_detected(pred, target, threshold, fraction=DETECT_FRACTION,
                   zero_fp_tolerance=ZERO_COVERAGE_FP_TOLERANCE) -> bool:
    c = pixel_confusion(pred, target, threshold)
    cov = c.tp + c.fn
    if cov == 0:
        return c.fp <= zero_fp_tolerance
    return c.tp >= required_hits(cov, fraction)


def bucket_detection(targets, preds, threshold: float = DEFAULT_THRESHOLD, fraction=DETECT_FRACTION,
                     zero_fp_tolerance=ZERO_COVERAGE_FP_TOLERANCE) -> BucketReport:
    """Share of patches per coverage category in which the model recovers at
    least ``fraction`` of the invasive pixels. Zero-coverage patches count as
    correct when they have at most ``zero_fp_tolerance`` false positives."""
    targets, preds = list(targets), list(preds)
    if not targets:
        raise DataError("no patches to evaluate")
    if len(targets) != len(preds):
        raise ShapeError(f"{len(targets)} targets but {len(preds)} predictions")
    report = BucketReport({c: BucketRow(c) for c in CATEGORIES}, threshold)
    for t, p in zip(targets, preds):
        row = report.rows[categorize(coverage(t), np.asarray(t).size)]
        row.count += 1
        row.detected += patch_detected(p, t, threshold, fraction, zero_fp_tolerance)
    return report


def overlay(image, prediction, threshold: float = DEFAULT_THRESHOLD, valid=None) -> np.ndarray:
    """Blend predicted-positive pixels 50/50 with pure red; others unchanged.

    ``valid`` optionally masks pixels that carry a prediction at all.
    """
    image = np.asarray(image)
    prediction = np.asarray(prediction)
    if image.ndim != 3 or image.shape[2] < 3 or image.shape[:2] != prediction.shape:
        raise ShapeError(f"image {image.shape} and prediction {prediction.shape} not aligned")
    out = np.array(image[..., :3], dtype=np.uint8, copy=True)
    hit = np.asarray(prediction, np.float64) >= threshold
    if valid is not None:
        hit &= np.asarray(valid, bool)
    red = np.array([255, 0, 0], np.uint16)
    out[hit] = ((out[hit].astype(np.uint16) + red) // 2).astype(np.uint8)
    return out


@dataclass
class EvalReport:
    threshold: float
    counts: ConfusionCounts
    buckets: BucketReport
    threshold_source: str = "argument"

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "threshold_source": self.threshold_source,
            "pixels": self.counts.as_dict(),
            "tp_rate": _rate_or_none(tp_rate, self.counts),
            "tn_rate": _rate_or_none(tn_rate, self.counts),
            "buckets": self.buckets.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        def pct(fn):
            v = _rate_or_none(fn, self.counts)
            return "n/a" if v is None else f"{100 * v:.1f}%"

        table1 = (
            f"Pixel rates at threshold {self.threshold:g}\n"
            f"{'True Positive':<16}{pct(tp_rate):>10}\n"
            f"{'True Negative':<16}{pct(tn_rate):>10}\n"
        )
        return table1 + "\n" + self.buckets.to_text()


def evaluate(model, samples, threshold: float = DEFAULT_THRESHOLD, threshold_source="argument") -> EvalReport:
    from .model import predict

    samples = list(samples)
    if not samples:
        raise DataError("no samples to evaluate")
    preds = predict(model, np.stack([s.image for s in samples]))
    targets = [s.target for s in samples]
    return EvalReport(threshold, pooled_confusion(preds, targets, threshold),
                      bucket_detection(targets, preds, threshold), threshold_source)
