"""Pixel-count segmentation metrics and their aggregation over images and runs."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from cmunet.errors import DimensionError, ValidationError

METRIC_NAMES = ("iou", "recall", "precision", "f1", "accuracy")
METRIC_TITLES = {"iou": "IoU", "recall": "Recall", "precision": "Precision", "f1": "F1-value", "accuracy": "Accuracy"}


@dataclass(frozen=True)
class SegMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    iou: float
    recall: float
    precision: float
    f1: float
    accuracy: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def scores(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


@dataclass(frozen=True)
class DatasetMetrics:
    """Unweighted per-image means."""

    iou: float
    recall: float
    precision: float
    f1: float
    accuracy: float
    count: int = 1

    def scores(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


@dataclass(frozen=True)
class RunSummary:
    mean: dict[str, float]
    std: dict[str, float]
    runs: int

    def formatted(self, name: str) -> str:
        return format_mean_std(self.mean[name], self.std[name])


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where prob > threshold (strict), else 0."""
    return (np.asarray(probs) > threshold).astype(np.uint8)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def compute_metrics(pred: np.ndarray, target: np.ndarray) -> SegMetrics:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}", axis="shape")
    for what, arr in (("prediction", pred), ("target", target)):
        if not np.all((arr == 0) | (arr == 1)):
            raise ValidationError(f"{what} mask must be binary")
    p = pred.astype(bool)
    t = target.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    empty = tp + fp + fn == 0
    return SegMetrics(
        tp=tp, fp=fp, fn=fn, tn=tn,
        iou=_ratio(tp, tp + fp + fn, empty),
        recall=_ratio(tp, tp + fn, empty),
        precision=_ratio(tp, tp + fp, empty),
        f1=_ratio(2 * tp, 2 * tp + fp + fn, empty),
        accuracy=_ratio(tp + tn, tp + fp + fn + tn, empty),
    )


def aggregate(per_image: Sequence[SegMetrics]) -> DatasetMetrics:
    if not per_image:
        raise ValueError("cannot aggregate an empty list of metrics")
    means = {k: float(np.mean([getattr(m, k) for m in per_image])) for k in METRIC_NAMES}
    return DatasetMetrics(count=len(per_image), **means)


def aggregate_runs(runs: Sequence[DatasetMetrics]) -> RunSummary:
    """Mean and sample standard deviation (n - 1) of each metric across runs.

    A single run reports a standard deviation of 0.
    """
    if not runs:
        raise ValueError("cannot aggregate an empty list of runs")
    mean, std = {}, {}
    for k in METRIC_NAMES:
        vals = [getattr(r, k) for r in runs]
        mean[k] = statistics.fmean(vals)
        std[k] = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return RunSummary(mean=mean, std=std, runs=len(runs))


def format_percent(x: float) -> str:
    return f"{100.0 * x:.2f}"


def format_mean_std(mean: float, std: float) -> str:
    return f"{format_percent(mean)}±{format_percent(std)}"


def text_table(rows: Iterable[tuple[str, dict[str, str]]], label: str = "") -> str:
    """Fixed-width table with one column per metric."""
    rows = list(rows)
    headers = [label] + [METRIC_TITLES[k] for k in METRIC_NAMES]
    body = [[name] + [cells.get(k, "") for k in METRIC_NAMES] for name, cells in rows]
    widths = [max(len(r[i]) for r in [headers] + body) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


def per_image_csv(ids: Sequence[str], per_image: Sequence[SegMetrics], summary: DatasetMetrics) -> str:
    """CSV with one row per image plus a trailing ``mean`` row; scores in percent."""
    buf = io.StringIO()
    count_fields = [f.name for f in fields(SegMetrics) if f.name not in METRIC_NAMES]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", *count_fields, *METRIC_NAMES])
    for name, m in zip(ids, per_image):
        writer.writerow([name, *(getattr(m, f) for f in count_fields), *(format_percent(getattr(m, k)) for k in METRIC_NAMES)])
    writer.writerow(["mean", *([""] * len(count_fields)), *(format_percent(getattr(summary, k)) for k in METRIC_NAMES)])
    return buf.getvalue()
