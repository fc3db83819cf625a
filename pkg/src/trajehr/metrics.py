"""Ranking metrics (AUROC, average-precision AUPRC, F1) reported as percentages.

AUROC is pairwise concordance with half credit for ties, computed via average
ranks. AUPRC is the step-wise integral of precision over recall across
descending score thresholds (tied scores form one threshold), accumulated in
threshold order so results match a sequential brute-force evaluation exactly.
Binary F1 thresholds scores at 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels, ShapeMismatch


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ShapeMismatch(f"scores {scores.shape} vs labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ShapeMismatch("labels must be binary 0/1")
    return scores, labels


def metric_auroc(scores, labels) -> float:
    """Mann-Whitney AUROC x100; ties get 0.5 credit."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"auroc needs both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def metric_auprc(scores, labels) -> float:
    """Average precision x100 over descending-score thresholds."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DegenerateLabels(f"auprc needs both classes, got {n_pos} positives of {labels.size}")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # indices closing each tied block = the threshold points
    block_ends = np.flatnonzero(np.diff(s))
    thresholds = np.concatenate([block_ends, [s.size - 1]])
    ap = 0.0
    prev_recall = 0.0
    for i in thresholds:  # sequential accumulation keeps brute-force equality exact
        recall = tp[i] / n_pos
        precision = tp[i] / (tp[i] + fp[i])
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return 100.0 * ap


def metric_f1(scores, labels, threshold: float = 0.5) -> float:
    """F1 x100 with scores >= threshold counting as positive; 0 when undefined."""
    scores, labels = _check_binary(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    denom = 2 * tp + fp + fn
    return 100.0 * 2 * tp / denom if denom else 0.0


def metric_macro_auprc(score_matrix, label_matrix) -> tuple[float, list[float | None]]:
    """Unweighted mean of per-label AUPRC over labels with both classes present.

    Single-class labels report ``None`` in the per-label list and are skipped
    by the mean; if every label is degenerate the metric itself is degenerate.
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    labels = np.asarray(label_matrix)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeMismatch(f"expected matching (n, labels) matrices, got {scores.shape} vs {labels.shape}")
    per_label: list[float | None] = []
    for j in range(scores.shape[1]):
        try:
            per_label.append(metric_auprc(scores[:, j], labels[:, j]))
        except DegenerateLabels:
            per_label.append(None)
    usable = [v for v in per_label if v is not None]
    if not usable:
        raise DegenerateLabels("every label is single-class; macro AUPRC undefined")
    return float(np.mean(usable)), per_label


@dataclass
class MetricsReport:
    task: str
    n_samples: int
    f1: float
    auroc: float
    auprc: float
    macro_auprc: float | None = None
    per_label_auprc: list[float | None] | None = None
    n_degenerate_labels: int = 0

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_samples": self.n_samples,
            "f1": self.f1,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "macro_auprc": self.macro_auprc,
            "per_label_auprc": self.per_label_auprc,
            "n_degenerate_labels": self.n_degenerate_labels,
        }


def compute_metrics(scores, labels, task: str) -> MetricsReport:
    """Binary tasks use the single score column; multi-label tasks report
    flattened (sample, label) f1/auroc/auprc plus per-label and macro AUPRC."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1 or scores.shape[1] == 1:
        s, y = scores.ravel(), labels.ravel()
        return MetricsReport(
            task=task, n_samples=s.size,
            f1=metric_f1(s, y), auroc=metric_auroc(s, y), auprc=metric_auprc(s, y),
        )
    macro, per_label = metric_macro_auprc(scores, labels)
    flat_s, flat_y = scores.ravel(), labels.ravel()
    return MetricsReport(
        task=task, n_samples=scores.shape[0],
        f1=metric_f1(flat_s, flat_y), auroc=metric_auroc(flat_s, flat_y),
        auprc=metric_auprc(flat_s, flat_y),
        macro_auprc=macro, per_label_auprc=per_label,
        n_degenerate_labels=sum(1 for v in per_label if v is None),
    )


def aggregate_reports(reports: list[MetricsReport]) -> dict:
    """Mean +/- std blocks across seeds, plus the per-seed reports."""
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = ["f1", "auroc", "auprc"]
    if reports[0].macro_auprc is not None:
        keys.append("macro_auprc")
    agg = {}
    for key in keys:
        values = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        agg[key] = {"mean": float(values.mean()), "std": float(values.std(ddof=0))}
    return {"per_seed": [r.to_dict() for r in reports], "aggregate": agg, "n_seeds": len(reports)}
