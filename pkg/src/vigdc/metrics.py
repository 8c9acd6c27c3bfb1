"""Binary-classification metric suite: ROC/AUC plus the threshold-specific
counts reported for the damage classifier (FN at the 0.95 threshold, FP at
the 0.10 threshold, precision at 100% recall, accuracy, mean BCE).

A positive call requires score >= threshold everywhere, so the threshold
t* = min score over damaged samples achieves recall exactly 1.0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import BCE_CLAMP


@dataclass
class MetricsReport:
    n: int
    n_damaged: int
    n_undamaged: int
    auc: float | None
    roc_points: list           # (fpr, tpr) over the full threshold sweep
    accuracy: float            # threshold 0.5
    fn_at_95: int              # damaged samples with score < 0.95
    fp_at_10: int              # undamaged samples with score >= 0.10
    precision_at_full_recall: float
    full_recall_threshold: float | None
    mean_bce: float
    confusion: dict = field(default_factory=dict)  # threshold name -> {tp, fp, tn, fn}

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def _confusion(scores, labels, threshold):
    pos = scores >= threshold
    tp = int(np.sum(pos & (labels == 1)))
    fp = int(np.sum(pos & (labels == 0)))
    fn = int(np.sum(~pos & (labels == 1)))
    tn = int(np.sum(~pos & (labels == 0)))
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn}


def roc_curve(scores, labels):
    """(FPR, TPR) points for every distinct threshold, sweep high to low."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and scores[order[j]] == scores[order[i]]:
            if labels[order[j]] == 1:
                tp += 1
            else:
                fp += 1
            j += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return points


def auc_trapezoid(points):
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def mean_bce(scores, labels):
    p = np.clip(np.asarray(scores, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def compute_metrics(scores, labels) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.size == 0:
        raise ValueError("empty prediction set")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))

    if n_pos and n_neg:
        points = roc_curve(scores, labels)
        auc = auc_trapezoid(points)
    else:
        points, auc = [], None

    c50 = _confusion(scores, labels, 0.5)
    c95 = _confusion(scores, labels, 0.95)
    c10 = _confusion(scores, labels, 0.10)
    accuracy = (c50["tp"] + c50["tn"]) / scores.size

    if n_pos:
        t_star = float(scores[labels == 1].min())
        c_star = _confusion(scores, labels, t_star)
        denom = c_star["tp"] + c_star["fp"]
        precision_full = c_star["tp"] / denom if denom else 0.0
    else:
        t_star = None
        c_star = {}
        precision_full = float("nan")

    return MetricsReport(
        n=int(scores.size), n_damaged=n_pos, n_undamaged=n_neg,
        auc=auc, roc_points=[list(p) for p in points],
        accuracy=accuracy,
        fn_at_95=c95["fn"], fp_at_10=c10["fp"],
        precision_at_full_recall=precision_full,
        full_recall_threshold=t_star,
        mean_bce=mean_bce(scores, labels),
        confusion={"0.5": c50, "0.95": c95, "0.10": c10, "full_recall": c_star},
    )
