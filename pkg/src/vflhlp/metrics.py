"""Ranking metrics. Only depends on numpy so every stage can import it."""
from __future__ import annotations

import numpy as np

from .errors import UndefinedMetricError


def auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic.

    Tied scores get averaged ranks, which credits each tied positive/negative
    pair with exactly 0.5, the same convention as counting pairs directly.
    O(n log n); exact in float64 for any realistic n.

    Raises UndefinedMetricError when labels contain a single class.
    """
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError(
            f"labels and scores must be matching 1-d arrays, got "
            f"{labels.shape} and {scores.shape}"
        )
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )
    # average 1-based rank per tie group
    uniq, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    before = np.concatenate(([0], np.cumsum(counts)[:-1]))
    avg_rank = before + (counts + 1) / 2.0
    ranks = avg_rank[inverse]
    rank_sum = ranks[labels == 1.0].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
