"""Measurement and runtime verification of the update-rule identities.

Two exact identities are checked every round (max-norm residuals, so the
tolerance is dimension independent).  Writing gsum for the sum of all
stochastic gradients consumed in the round and A = 1 - sum(alpha):

* increment recursion:  delta_{t+1} = A * (eta_l / (S K)) gsum
                                      + sum_j alpha_j delta_{t-j}
* shifted-iterate update:  u_{t+1} = u_t - (eta_l / S) gsum, where
  u_t = x_t - (K / A) sum_j (sum_{s>=j} alpha_s) delta_{t-j}.

Both hold to rounding error for the momentum rule because the residuals are
reconstructed from the very gradient values the update consumed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .objectives import ClientObjective
from .vectors import ParamVector, max_abs


@dataclass
class MetricRow:
    """One round's recorded measurements; optional fields stay None when not applicable."""

    round: int
    loss: float
    grad_norm_sq: float
    grad_norm_sq_at_u: Optional[float]
    consistency: float
    delta_norm_sq: float
    residual_delta: Optional[float]
    residual_u: Optional[float]
    eta_l: float


@dataclass
class VerifierState:
    """Tracks the shifted iterate across rounds plus the worst residuals seen."""

    u: ParamVector
    max_residual_delta: float = 0.0
    max_residual_u: float = 0.0


def local_consistency(local_finals: Sequence[ParamVector], global_next: ParamVector) -> float:
    """Mean squared distance of the clients' end-of-round models from their aggregate."""
    if len(local_finals) == 0:
        raise ValueError("no local models")
    total = 0.0
    for x in local_finals:
        if x.shape != global_next.shape:
            raise ValueError(f"dimension mismatch: {x.shape} vs {global_next.shape}")
        r = x - global_next
        total += float(r @ r)
    return total / len(local_finals)


def compute_u(x: ParamVector, deltas: Sequence[ParamVector], alpha: Sequence[float], k_local: int) -> ParamVector:
    """Shifted iterate x - (K/A) sum_j (sum_{s=j}^{J-1} alpha_s) delta_{t-j}."""
    a_scale = 1.0 - sum(alpha)
    if a_scale <= 0:
        raise ValueError("alpha weights must sum below 1")
    tail = np.cumsum(alpha[::-1])[::-1]  # tail[j] = alpha_j + ... + alpha_{J-1}
    shift = None
    for c, d in zip(tail, deltas):
        if c == 0.0:
            continue
        shift = c * d if shift is None else shift + c * d
    if shift is None:
        return x.copy()
    return x - (k_local / a_scale) * shift


def verify_u_update(u_prev: ParamVector, u_next: ParamVector, grad_sum: ParamVector,
                    eta_l: float, s_participate: int, k_local: int) -> float:
    """Residual of u_{t+1} = u_t - (eta_l / S) * grad_sum (max-norm)."""
    predicted = u_prev - (eta_l / s_participate) * grad_sum
    return max_abs(u_next - predicted)


def verify_delta_recursion(delta_next: ParamVector, grad_sum: ParamVector,
                           deltas: Sequence[ParamVector], alpha: Sequence[float],
                           eta_l: float, s_participate: int, k_local: int) -> float:
    """Residual of delta_{t+1} = A * delta_tilde + sum_j alpha_j delta_{t-j} (max-norm).

    delta_tilde is the gradient average (eta_l / (S K)) * grad_sum over the
    sampled clients, which is exactly the set the aggregation used.
    """
    a_scale = 1.0 - sum(alpha)
    delta_tilde = (eta_l / (s_participate * k_local)) * grad_sum
    predicted = a_scale * delta_tilde
    for a, d in zip(alpha, deltas):
        if a != 0.0:
            predicted = predicted + a * d
    return max_abs(delta_next - predicted)


def fit_geometric_rate(series: Sequence[tuple]) -> float:
    """Per-round contraction factor from a log-linear least-squares fit.

    ``series`` is (round, value) pairs with positive values; the caller is
    expected to clip at some floor (e.g. 1e-16) and drop floored points.  The
    first 10% of the points are excluded as transient before the increment
    buffer fills.
    """
    if len(series) < 10:
        raise ValueError("need at least 10 points to fit a rate")
    rounds = np.array([t for t, _ in series], dtype=np.float64)
    values = np.array([v for _, v in series], dtype=np.float64)
    if np.any(values <= 0):
        raise ValueError("rate fit requires positive values")
    skip = len(series) // 10
    slope = np.polyfit(rounds[skip:], np.log(values[skip:]), 1)[0]
    return float(np.exp(slope))


def finite_difference_check(obj: ClientObjective, x: ParamVector, h: float) -> float:
    """Max relative error of the gradient oracle against central differences."""
    if h <= 0:
        raise ValueError("h must be positive")
    g = obj.full_gradient(x)
    worst = 0.0
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        fd = (obj.loss(x + e) - obj.loss(x - e)) / (2.0 * h)
        worst = max(worst, abs(fd - g[i]) / (abs(g[i]) + 1e-8))
    return worst
