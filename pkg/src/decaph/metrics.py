"""Task evaluation metrics: confusion-based scores, AUROC, Youden thresholding.

Undefined cells (0/0 divisions, e.g. PPV with no positive predictions) are
reported as NaN, never silently 0 -- small folds hit empty cells and the
distinction matters when averaging across folds.

AUROC is computed from the Mann-Whitney statistic with ties counted 1/2,
accumulated in exact integer arithmetic (one float division at the end), so
it agrees bit-for-bit with a brute-force pairwise comparison and is invariant
under strictly monotone score transforms.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ConfusionCounts",
    "BinaryMetrics",
    "MulticlassMetrics",
    "confusion_counts",
    "binary_metrics",
    "auroc",
    "roc_curve",
    "tpr_at_fpr",
    "youden_threshold",
    "multiclass_metrics",
]


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class tp/fp/tn/fn counts."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def support(self) -> int:
        return self.tp + self.fn


def _safe_div(num: float, den: float) -> float:
    return num / den if den != 0 else math.nan


def confusion_counts(preds: np.ndarray, labels: np.ndarray, class_id: int) -> ConfusionCounts:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    pos_pred = preds == class_id
    pos_true = labels == class_id
    tp = int(np.sum(pos_pred & pos_true))
    fp = int(np.sum(pos_pred & ~pos_true))
    fn = int(np.sum(~pos_pred & pos_true))
    tn = int(np.sum(~pos_pred & ~pos_true))
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _f1(c: ConfusionCounts) -> float:
    return _safe_div(2.0 * c.tp, 2.0 * c.tp + c.fn + c.fp)


@dataclass(frozen=True)
class BinaryMetrics:
    ppv: float
    npv: float
    f1_per_class: tuple[float, float]  # (negative class, positive class)
    macro_f1: float
    weighted_f1: float


def binary_metrics(scores: np.ndarray, labels: np.ndarray, threshold: float) -> BinaryMetrics:
    """Threshold scores at >= threshold and evaluate the binary task.

    PPV = TP/(TP+FP), NPV = TN/(TN+FN), per-class F1 = 2TP_c/(2TP_c+FN_c+FP_c),
    macro F1 = unweighted mean over classes, weighted F1 = support-weighted
    mean. Classes absent from the labels are excluded from the averages.
    """
    if not np.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    preds = (scores >= threshold).astype(np.int64)

    pos = confusion_counts(preds, labels, 1)
    neg = confusion_counts(preds, labels, 0)
    f1s = (_f1(neg), _f1(pos))
    supports = (neg.support, pos.support)

    defined = [(f, n) for f, n in zip(f1s, supports) if not math.isnan(f)]
    macro = math.nan
    weighted = math.nan
    if defined:
        macro = sum(f for f, _ in defined) / len(defined)
        total = sum(n for _, n in defined)
        if total > 0:
            weighted = sum(f * n for f, n in defined) / total
    return BinaryMetrics(
        ppv=_safe_div(pos.tp, pos.tp + pos.fp),
        npv=_safe_div(neg.tp, neg.tp + neg.fp),
        f1_per_class=f1s,
        macro_f1=macro,
        weighted_f1=weighted,
    )


def _rank_sum_doubled(scores: np.ndarray, labels: np.ndarray) -> tuple[int, int, int]:
    """(2 * positive rank sum, n_pos, n_neg) in exact integer arithmetic."""
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    y = labels[order]
    n = len(s)
    twice_rank_sum = 0  # doubled mid-ranks are integers even with ties
    i = 0
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        twice_mid_rank = (i + 1) + j  # = 2 * (average 1-based rank of the tie group)
        twice_rank_sum += twice_mid_rank * int(np.sum(y[i:j] == 1))
        i = j
    n_pos = int(np.sum(y == 1))
    n_neg = n - n_pos
    return twice_rank_sum, n_pos, n_neg


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve, ties counted 1/2.

    Equals the trapezoidal area under the exact threshold-sweep curve;
    computed via the rank statistic so the only float operation is the final
    division, matching the O(n^2) pairwise definition exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-d arrays")
    twice_rank_sum, n_pos, n_neg = _rank_sum_doubled(scores, labels)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present to compute AUROC")
    # 2*U = 2*rank_sum - n_pos*(n_pos+1); AUROC = U / (n_pos*n_neg)
    twice_u = twice_rank_sum - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact threshold-sweep ROC: (fpr, tpr, thresholds), thresholds descending.

    Point k is the operating point "predict positive iff score >= thresholds[k]".
    A leading (0, 0) anchor with threshold +inf is included.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present to compute a ROC curve")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    distinct = np.flatnonzero(np.diff(s)) if len(s) > 1 else np.array([], dtype=np.int64)
    cut = np.concatenate([distinct, [len(s) - 1]])  # last index of each tie group
    tp = np.cumsum(y == 1)[cut]
    fp = np.cumsum(y == 0)[cut]
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    thresholds = np.concatenate([[np.inf], s[cut]])
    return fpr, tpr, thresholds


def tpr_at_fpr(scores: np.ndarray, labels: np.ndarray, fpr_targets: list[float]) -> list[float]:
    """Max TPR attainable at FPR <= target, per target (step interpolation)."""
    fpr, tpr, _ = roc_curve(scores, labels)
    out = []
    for target in fpr_targets:
        ok = fpr <= target
        out.append(float(np.max(tpr[ok])) if np.any(ok) else 0.0)
    return out


def youden_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold maximizing Youden's J = TPR - FPR; ties break to the smallest.

    Candidates are every observed score plus +inf (predict nothing positive);
    the decision rule is "positive iff score >= threshold".
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    fpr, tpr, thresholds = roc_curve(scores, labels)
    j = tpr - fpr
    best = np.max(j)
    # thresholds are descending, so the last index with maximal J is the
    # smallest candidate threshold achieving it
    idx = np.flatnonzero(j >= best - 0.0)[-1]
    t = thresholds[idx]
    # the +inf anchor (predict nothing) can win only if every real candidate
    # has J < 0; return a finite threshold with the same operating point
    return float(t) if np.isfinite(t) else float(np.max(scores)) + 1.0


@dataclass(frozen=True)
class MulticlassMetrics:
    median_f1: float
    weighted_precision: float
    weighted_recall: float
    f1_per_class: tuple[float, ...]


def multiclass_metrics(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> MulticlassMetrics:
    """Median F1 over classes plus support-weighted precision and recall.

    Classes absent from the labels have undefined F1 and are excluded from
    the median (with a warning); even-length medians average the middle two.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    preds = np.asarray(preds).astype(np.int64)
    labels = np.asarray(labels).astype(np.int64)
    f1s = []
    precisions = []
    recalls = []
    supports = []
    for c in range(n_classes):
        cc = confusion_counts(preds, labels, c)
        f1s.append(_f1(cc))
        precisions.append(_safe_div(cc.tp, cc.tp + cc.fp))
        recalls.append(_safe_div(cc.tp, cc.tp + cc.fn))
        supports.append(cc.support)

    defined = [f for f, n in zip(f1s, supports) if n > 0 and not math.isnan(f)]
    if len(defined) < len(f1s):
        warnings.warn("classes absent from labels excluded from median F1", stacklevel=2)
    median = float(np.median(defined)) if defined else math.nan

    total = sum(supports)
    w_prec = math.nan
    w_rec = math.nan
    if total > 0:
        # a class with support > 0 always has defined recall; precision can be
        # NaN when the class is never predicted -- that class counts as 0 in
        # the weighted sum (warned) so the aggregate stays defined
        if any(math.isnan(p) and n > 0 for p, n in zip(precisions, supports)):
            warnings.warn("never-predicted class counted as precision 0", stacklevel=2)
        w_prec = sum(
            (0.0 if math.isnan(p) else p) * n for p, n in zip(precisions, supports)
        ) / total
        w_rec = sum(r * n for r, n in zip(recalls, supports) if n > 0) / total
    return MulticlassMetrics(
        median_f1=median,
        weighted_precision=w_prec,
        weighted_recall=w_rec,
        f1_per_class=tuple(f1s),
    )
