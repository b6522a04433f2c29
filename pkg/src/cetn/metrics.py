"""AUC, logloss and RelaImpr."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """The metric is not defined for the given input."""


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties (ties earn half credit)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pairwise_auc(scores, labels) -> float:
    """O(N^2) reference: fraction of (positive, negative) pairs ranked correctly."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def logloss(probs, labels, eps: float = 1e-7) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64).ravel(), eps, 1 - eps)
    y = np.asarray(labels, dtype=np.float64).ravel()
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass(frozen=True)
class Metrics:
    auc: float
    logloss: float


def relaimpr(target: Metrics, base: Metrics) -> tuple:
    """Relative improvement in percent: (AUC form, logloss form)."""
    if base.auc <= 0.5:
        raise UndefinedMetricError(f"base AUC {base.auc} must exceed 0.5")
    auc_pct = ((target.auc - 0.5) / (base.auc - 0.5) - 1.0) * 100.0
    ll_pct = (base.logloss - target.logloss) / base.logloss * 100.0
    return auc_pct, ll_pct
