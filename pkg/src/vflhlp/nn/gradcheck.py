"""Central finite-difference gradient checking.

The check perturbs every scalar parameter by +-eps, so it is O(P) loss
evaluations; meant for small models in tests, not training-sized ones.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


def max_relative_error(
    analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]
) -> float:
    """Largest |a - n| normalized by the largest gradient magnitude overall.

    Per-entry relative error explodes when a single coordinate is near zero,
    so the error is scale-normalized: max|a - n| / max(1e-12, max(|a|, |n|)).
    """
    scale = 1e-12
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        scale = max(scale, float(np.abs(a).max(initial=0.0)))
        scale = max(scale, float(np.abs(n).max(initial=0.0)))
        worst = max(worst, float(np.abs(a - n).max(initial=0.0)))
    return worst / scale


def numeric_grads(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences of loss_fn w.r.t. every entry of params.

    params must hold the live arrays the loss reads; entries are perturbed
    in place and restored exactly.
    """
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        out[name] = g
    return out


def grad_check(
    loss_fn: Callable[[], float],
    grads_fn: Callable[[], dict[str, np.ndarray]],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Return the scale-normalized max relative error of analytic vs FD grads."""
    analytic = {k: np.array(v, copy=True) for k, v in grads_fn().items()}
    if set(analytic) != set(params):
        raise ValueError(
            f"gradient names {sorted(analytic)} do not match params {sorted(params)}"
        )
    numeric = numeric_grads(loss_fn, params, eps=eps)
    return max_relative_error(analytic, numeric)
