"""Pixel-wise detection and segmentation metrics, per class and aggregated.

Undefined values (0/0 ratios, both-empty Dice) are flagged and excluded from
aggregation rather than silently zeroed; exclusion counts are reported.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats as scipy_stats

from .errors import ContractError

FOREGROUND_CLASSES = (1, 2, 3)
METRIC_NAMES = ("precision", "sensitivity", "specificity", "accuracy", "dice")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: np.ndarray, truth: np.ndarray, class_id: int) -> ConfusionCounts:
    """One-vs-rest pixel counts for a class over argmax label maps."""
    if pred.shape != truth.shape:
        raise ContractError(f"label map shapes differ: {pred.shape} vs {truth.shape}")
    p = pred == class_id
    t = truth == class_id
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _ratio(num: int, den: int):
    return None if den == 0 else num / den


def metrics(counts: ConfusionCounts) -> dict:
    """precision/sensitivity/specificity/accuracy; 0/0 cases map to None."""
    return {
        "precision": _ratio(counts.tp, counts.tp + counts.fp),
        "sensitivity": _ratio(counts.tp, counts.tp + counts.fn),
        "specificity": _ratio(counts.tn, counts.tn + counts.fp),
        "accuracy": _ratio(counts.tp + counts.tn, counts.total),
    }


def dice(pred_mask: np.ndarray, truth_mask: np.ndarray):
    """2|A∩B| / (|A|+|B|); None when both masks are empty."""
    if pred_mask.shape != truth_mask.shape:
        raise ContractError(f"mask shapes differ: {pred_mask.shape} vs {truth_mask.shape}")
    a = int(pred_mask.sum())
    b = int(truth_mask.sum())
    if a + b == 0:
        return None
    inter = int((pred_mask & truth_mask).sum())
    return 2.0 * inter / (a + b)


def foreground_aggregate(pred: np.ndarray, truth: np.ndarray):
    """Collapse the ROI classes into one foreground label, then score binary."""
    p = np.isin(pred, FOREGROUND_CLASSES)
    t = np.isin(truth, FOREGROUND_CLASSES)
    counts = confusion(p.astype(np.uint8), t.astype(np.uint8), 1)
    return counts, dice(p, t)


@dataclass
class TTestResult:
    statistic: float
    p_value: float
    degenerate: bool = False


def paired_ttest(a, b) -> TTestResult:
    """Two-sample t statistic with pooled variance; two-tailed p from the t CDF."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size or a.size < 2:
        raise ContractError("t-test needs two equal-length samples of size >= 2")
    n = a.size
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    df = 2 * n - 2
    pooled = ((n - 1) * var_a + (n - 1) * var_b) / df
    se = np.sqrt(pooled * (2.0 / n))
    if se == 0.0:
        if a.mean() == b.mean():
            return TTestResult(0.0, 1.0, degenerate=True)
        return TTestResult(np.inf if a.mean() > b.mean() else -np.inf, 0.0,
                           degenerate=True)
    t = (a.mean() - b.mean()) / se
    p = 2.0 * float(scipy_stats.t.sf(abs(t), df))
    return TTestResult(float(t), p)


# ---------------------------------------------------------------------------
# per-slice evaluation and aggregation
# ---------------------------------------------------------------------------

ROI_ROWS = ("lungs", "mediastinum", "tumors", "foreground", "other")
_CLASS_OF_ROW = {"other": 0, "lungs": 1, "mediastinum": 2, "tumors": 3}


def slice_scores(pred: np.ndarray, truth: np.ndarray) -> dict:
    """Metric values for one slice: {(roi, metric): value-or-None}."""
    out = {}
    for row in ROI_ROWS:
        if row == "foreground":
            counts, d = foreground_aggregate(pred, truth)
        else:
            cid = _CLASS_OF_ROW[row]
            counts = confusion(pred, truth, cid)
            d = dice(pred == cid, truth == cid)
        for name, value in metrics(counts).items():
            out[(row, name)] = value
        if row != "other":  # the catch-all class has no segmentation row
            out[(row, "dice")] = d
    return out


@dataclass
class MetricCell:
    mean: float | None
    std: float | None
    n: int
    undefined_count: int


class MetricsReport:
    """Mean and standard deviation of each metric over test slices."""

    def __init__(self, per_slice: list):
        self.per_slice = per_slice
        self.cells: dict = {}
        keys = per_slice[0].keys() if per_slice else []
        for key in keys:
            values = [s[key] for s in per_slice]
            defined = [v for v in values if v is not None]
            undefined = len(values) - len(defined)
            if defined:
                arr = np.asarray(defined, dtype=np.float64)
                self.cells[key] = MetricCell(float(arr.mean()),
                                             float(arr.std(ddof=0)),
                                             len(defined), undefined)
            else:
                self.cells[key] = MetricCell(None, None, 0, undefined)

    def mean(self, roi: str, metric: str):
        return self.cells[(roi, metric)].mean

    def series(self, roi: str, metric: str) -> list:
        """Per-slice values with undefined entries dropped."""
        return [s[(roi, metric)] for s in self.per_slice
                if s[(roi, metric)] is not None]


def evaluate_slices(pred_labels: np.ndarray, truth_labels: np.ndarray) -> MetricsReport:
    """pred/truth: [n,h,w] integer label maps."""
    if pred_labels.shape != truth_labels.shape:
        raise ContractError("prediction and truth stacks must match")
    return MetricsReport([slice_scores(p, t) for p, t in zip(pred_labels, truth_labels)])


def write_metrics_csv(path: str, reports: dict) -> None:
    """``reports``: method name -> MetricsReport."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "roi", "metric", "mean", "std", "n", "undefined_count"])
        for method, report in reports.items():
            for (roi, metric), cell in report.cells.items():
                writer.writerow([
                    method, roi, metric,
                    "" if cell.mean is None else f"{cell.mean:.6f}",
                    "" if cell.std is None else f"{cell.std:.6f}",
                    cell.n, cell.undefined_count,
                ])


def write_comparisons_csv(path: str, reports: dict) -> None:
    """Pairwise two-sample t-tests between methods on every (roi, metric) series."""
    methods = list(reports)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method_a", "method_b", "roi", "metric", "p_value"])
        for i, ma in enumerate(methods):
            for mb in methods[i + 1:]:
                for key in reports[ma].cells:
                    a = reports[ma].series(*key)
                    b = reports[mb].series(*key)
                    if len(a) != len(b) or len(a) < 2:
                        continue
                    result = paired_ttest(a, b)
                    writer.writerow([ma, mb, key[0], key[1], f"{result.p_value:.6g}"])
