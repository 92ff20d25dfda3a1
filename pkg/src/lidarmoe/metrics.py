"""Segmentation and robustness metrics.

Per-class IoU is TP / (TP + FP + FN); mIoU averages over classes that
occur in predictions or labels (a class absent from both is excluded).
Corruption Error and Resilience Rate for one corruption type over three
severities are

    CE = sum(1 - IoU_i) / sum(1 - IoU_i_baseline)
    RR = sum(IoU_i) / (3 * IoU_clean)

reported in percent, with means over corruption types.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    """Metric inputs are empty or inconsistent."""


@dataclass
class MetricReport:
    """Per-class confusion counts and IoU percentages."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    iou: np.ndarray          # percent; NaN for classes absent everywhere
    miou: float              # percent
    per_corruption: dict = field(default_factory=dict)
    mce: float | None = None
    mrr: float | None = None

    def included_classes(self):
        return np.flatnonzero(~np.isnan(self.iou))

    def to_json(self) -> dict:
        doc = {
            "tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist(),
            "iou": [None if np.isnan(x) else x for x in self.iou.tolist()],
            "miou": self.miou,
        }
        if self.per_corruption:
            doc["per_corruption"] = self.per_corruption
        if self.mce is not None:
            doc["mce"] = self.mce
        if self.mrr is not None:
            doc["mrr"] = self.mrr
        return doc


def compute_miou(predictions, labels, num_classes: int) -> MetricReport:
    """Confusion-count IoU over paired prediction/label vectors.

    Ignore-labeled points (label < 0) are excluded entirely.
    """
    predictions = np.asarray(predictions, np.int64).reshape(-1)
    labels = np.asarray(labels, np.int64).reshape(-1)
    if predictions.shape != labels.shape:
        raise MetricError("predictions and labels lengths disagree")
    if predictions.size == 0:
        raise MetricError("empty input")
    keep = labels >= 0
    predictions, labels = predictions[keep], labels[keep]
    if predictions.size == 0:
        raise MetricError("all labels ignored")
    tp = np.zeros(num_classes, np.int64)
    fp = np.zeros(num_classes, np.int64)
    fn = np.zeros(num_classes, np.int64)
    for c in range(num_classes):
        tp[c] = int(np.sum((predictions == c) & (labels == c)))
        fp[c] = int(np.sum((predictions == c) & (labels != c)))
        fn[c] = int(np.sum((predictions != c) & (labels == c)))
    denom = tp + fp + fn
    iou = np.full(num_classes, np.nan)
    present = denom > 0
    iou[present] = 100.0 * tp[present] / denom[present]
    miou = float(np.mean(iou[present])) if np.any(present) else float("nan")
    return MetricReport(tp, fp, fn, iou, miou)


def compute_mce_mrr(model_ious: dict, baseline_ious: dict, clean_iou: float):
    """Robustness aggregates from per-corruption severity-1..3 IoUs.

    ``model_ious`` and ``baseline_ious`` map corruption name to three IoU
    percentages; returns (mCE, mRR, per-corruption dict), all percent.
    """
    if clean_iou <= 0:
        raise MetricError("clean IoU must be positive")
    if set(model_ious) != set(baseline_ious):
        raise MetricError("model and baseline corruption sets disagree")
    per = {}
    ces, rrs = [], []
    for name in sorted(model_ious):
        m = np.asarray(model_ious[name], np.float64) / 100.0
        b = np.asarray(baseline_ious[name], np.float64) / 100.0
        if m.shape != (3,) or b.shape != (3,):
            raise MetricError("each corruption needs exactly three severities")
        base_err = np.sum(1.0 - b)
        if base_err == 0:
            raise MetricError(f"baseline corruption error is zero for {name}")
        ce = 100.0 * float(np.sum(1.0 - m) / base_err)
        rr = 100.0 * float(np.sum(m) / (3.0 * clean_iou / 100.0))
        per[name] = {"ce": ce, "rr": rr}
        ces.append(ce)
        rrs.append(rr)
    return float(np.mean(ces)), float(np.mean(rrs)), per
