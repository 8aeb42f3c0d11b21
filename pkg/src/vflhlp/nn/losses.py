"""Binary cross-entropy on logits, numerically stable for large |logit|."""
from __future__ import annotations

import numpy as np

from ..errors import SchemaError


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Stable logistic function, exact for extreme logits."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_with_logits(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logits.

    Uses the max(l, 0) - l*y + log(1 + exp(-|l|)) form so logits of +-1000
    produce finite losses and gradients. Gradient is (sigmoid(l) - y) / n.

    Args:
        logits: [n] float64 logits.
        labels: [n] labels in {0, 1}.

    Returns:
        (loss, dloss_dlogits) with dloss_dlogits shaped like logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.ndim != 1 or labels.shape != logits.shape:
        raise SchemaError(
            f"logits and labels must be matching 1-d arrays, got "
            f"{logits.shape} and {labels.shape}"
        )
    if logits.size == 0:
        raise SchemaError("empty batch")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise SchemaError("labels must be 0 or 1")
    n = logits.size
    per = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    grad = (sigmoid(logits) - labels) / n
    return float(per.mean()), grad
