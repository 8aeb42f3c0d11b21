"""Vertical federated learning with hybrid local pre-training.

K parties hold disjoint feature blocks over overlapping samples; party 1
also holds the labels. The few samples aligned across all parties are
rarely enough to train a split model well, so both sides pre-train on
their full local tables first: the active party supervised, the passive
parties with a contrastive objective over feature corruption. Downstream
split training warm-starts from the passive encoders and anchors the
active party's weights to its local solution.
"""

__version__ = "0.1.0"

from .federated import TrainMode  # noqa: E402  (re-export)

__all__ = ["TrainMode", "__version__"]
