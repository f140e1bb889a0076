"""Classification metrics: confusion counts, ROC/AUC, and DeLong's paired AUC test.

The ROC sweep visits every distinct score as a threshold (ties grouped
into one step) and integrates by trapezoid; an independent Mann-Whitney
pairwise estimator serves as its cross-check. DeLong's test compares two
models scored on the same cases via mid-rank placement values and their
structural-components covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _validate_scores_labels(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length 1-D, got {scores.shape} vs {labels.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def _require_both_classes(labels: np.ndarray) -> None:
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise ValueError("both classes must be present")


# ---------------------------------------------------------------------------
# Confusion counts and pointwise rates
# ---------------------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_at_threshold(scores, labels, threshold: float) -> ConfusionCounts:
    """Predict positive iff score >= threshold, then count the four cells."""
    scores, labels = _validate_scores_labels(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def true_positive_rate(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise ValueError("true_positive_rate undefined without positive cases")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise ValueError("specificity undefined without negative cases")
    return c.tn / (c.tn + c.fp)


def false_positive_rate(c: ConfusionCounts) -> float:
    """1 - specificity, computed as the literal complement so the identity is exact."""
    return 1.0 - specificity(c)


# ---------------------------------------------------------------------------
# ROC curve and AUC
# ---------------------------------------------------------------------------


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; one per grouped distinct score
    fpr: np.ndarray  # starts at 0.0, ends at 1.0, nondecreasing
    tpr: np.ndarray
    auc: float


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over distinct scores, ties grouped; trapezoidal AUC.

    Point j gives the (fpr, tpr) of predicting positive at score >= t_j;
    a leading sentinel above the max score contributes the (0, 0) corner
    and the sweep ends at (1, 1) when every case is predicted positive.
    """
    scores, labels = _validate_scores_labels(scores, labels)
    _require_both_classes(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos

    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    l_sorted = labels[order]
    # group equal scores into one step: take cumulative counts at the last
    # index of each tie group
    distinct = np.nonzero(np.diff(s_sorted))[0]
    last_idx = np.concatenate([distinct, [scores.size - 1]])
    cum_tp = np.cumsum(l_sorted)[last_idx]
    cum_fp = np.cumsum(1 - l_sorted)[last_idx]

    tpr = np.concatenate([[0.0], cum_tp / n_pos])
    fpr = np.concatenate([[0.0], cum_fp / n_neg])
    thresholds = np.concatenate([[np.inf], s_sorted[last_idx]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def mann_whitney_auc(scores, labels) -> float:
    """Mean over all (positive, negative) pairs of [s_p > s_n] + 0.5 [s_p == s_n]."""
    scores, labels = _validate_scores_labels(scores, labels)
    _require_both_classes(labels)
    pos = scores[labels == 1][:, None]
    neg = scores[labels == 0][None, :]
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))


# ---------------------------------------------------------------------------
# DeLong's paired test
# ---------------------------------------------------------------------------


@dataclass
class DeLongResult:
    auc_a: float
    auc_b: float
    var_diff: float
    z: float
    p_value: float
    degenerate: bool = False  # variance of the difference was exactly zero


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean rank of their group."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    z = x[order]
    n = x.size
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j < n and z[j] == z[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    out = np.empty(n)
    out[order] = ranks
    return out


def _placements(scores: np.ndarray, pos_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-case placement values (V10 for positives, V01 for negatives) and the AUC."""
    x = scores[pos_mask]
    y = scores[~pos_mask]
    m, n = x.size, y.size
    tx = midranks(x)
    ty = midranks(y)
    tz = midranks(np.concatenate([x, y]))
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    auc = float((tz[:m].sum() - m * (m + 1) / 2.0) / (m * n))
    return v10, v01, auc


def delong_test(scores_a, scores_b, labels) -> DeLongResult:
    """Two-sided paired DeLong test for AUC_a - AUC_b on the same cases.

    Variance combines the (m-1)- and (n-1)-normalized covariances of the
    positive and negative placement values. A zero variance is flagged
    degenerate: p = 1 when the AUCs are equal, else p = 0.
    """
    scores_a, labels = _validate_scores_labels(scores_a, labels)
    scores_b, _ = _validate_scores_labels(scores_b, labels)
    _require_both_classes(labels)
    pos_mask = labels == 1
    m = int(pos_mask.sum())
    n = labels.size - m

    v10_a, v01_a, auc_a = _placements(scores_a, pos_mask)
    v10_b, v01_b, auc_b = _placements(scores_b, pos_mask)

    def cov_diff(va, vb, denom):
        if denom < 1:
            return 0.0
        d = va - vb
        return float(d.var(ddof=0)) * d.size / denom

    # var(A_a - A_b) per structural components: S10 contribution over
    # positives plus S01 over negatives. cov(a,a)+cov(b,b)-2cov(a,b)
    # equals var(a-b), computed directly for numerical stability.
    var = cov_diff(v10_a, v10_b, m - 1) / m + cov_diff(v01_a, v01_b, n - 1) / n
    diff = auc_a - auc_b
    if var <= 0.0:
        if diff == 0.0:
            return DeLongResult(auc_a, auc_b, 0.0, 0.0, 1.0, degenerate=True)
        inf_z = math.inf if diff > 0 else -math.inf
        return DeLongResult(auc_a, auc_b, 0.0, inf_z, 0.0, degenerate=True)
    z = diff / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return DeLongResult(auc_a, auc_b, var, z, p, degenerate=False)
