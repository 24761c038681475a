"""DRM estimation from return samples.

Two independent routes are provided: Choquet integration of a step CDF
(:func:`edf`, :func:`weighted_cdf`, :func:`choquet_drm`) and closed-form
order-statistics sums (:func:`drm_onpolicy_estimate`,
:func:`drm_offpolicy_estimate`). They must agree to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distortion import DistortionFunction, g_eval


@dataclass(frozen=True, eq=False)
class StepCdf:
    """Right-continuous step CDF: ``values[i]`` holds on ``[breakpoints[i], breakpoints[i+1])``.

    Zero below the first breakpoint; the final value is 1.
    """

    breakpoints: np.ndarray
    values: np.ndarray
    m_r: float

    def __post_init__(self):
        x = np.asarray(self.breakpoints, dtype=float)
        F = np.asarray(self.values, dtype=float)
        if x.ndim != 1 or x.shape != F.shape or x.size == 0:
            raise ValueError("breakpoints and values must be nonempty 1-d arrays of equal length")
        if np.any(np.diff(x) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(np.diff(F) < 0) or F[0] < 0 or F[-1] != 1.0:
            raise ValueError("values must be nondecreasing in [0, 1] and end at 1")
        if np.any(np.abs(x) > self.m_r):
            raise ValueError(f"breakpoints must lie in [-{self.m_r}, {self.m_r}]")
        object.__setattr__(self, "breakpoints", x)
        object.__setattr__(self, "values", F)

    def __call__(self, x):
        idx = np.searchsorted(self.breakpoints, x, side="right")
        padded = np.concatenate(([0.0], self.values))
        return padded[idx]


@dataclass(frozen=True, eq=False)
class ReturnBatch:
    returns: np.ndarray
    m_r: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        R = np.asarray(self.returns, dtype=float).reshape(-1)
        if R.size == 0:
            raise ValueError("return batch is empty")
        if np.any(np.abs(R) > self.m_r):
            raise ValueError(f"returns must lie in [-{self.m_r}, {self.m_r}]")
        object.__setattr__(self, "returns", R)
        if self.weights is not None:
            w = _check_weights(self.weights, R.size)
            object.__setattr__(self, "weights", w)


def _check_weights(weights, m: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape[-1] != m:
        raise ValueError(f"expected {m} weights, got {w.shape[-1]}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("importance weights must be nonnegative and finite")
    return w


def _merge_ties(sorted_x: np.ndarray, cum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # keep the last entry of each run of equal values: it carries the cumulative mass
    last_of_run = np.append(sorted_x[1:] != sorted_x[:-1], True)
    return sorted_x[last_of_run], cum[last_of_run]


def edf(batch: ReturnBatch) -> StepCdf:
    """Empirical distribution function of the returns."""
    x = np.sort(batch.returns)
    m = x.size
    cum = np.arange(1, m + 1) / m
    xs, F = _merge_ties(x, cum)
    F[-1] = 1.0
    return StepCdf(xs, F, batch.m_r)


def weighted_cdf(batch: ReturnBatch) -> StepCdf:
    """Importance-weighted CDF, clipped at 1 and forced to 1 at the largest return."""
    if batch.weights is None:
        raise ValueError("weighted_cdf needs importance weights")
    order = np.argsort(batch.returns, kind="stable")
    x = batch.returns[order]
    m = x.size
    cum = np.minimum(1.0, np.cumsum(batch.weights[order]) / m)
    xs, F = _merge_ties(x, cum)
    F[-1] = 1.0
    return StepCdf(xs, F, batch.m_r)


def choquet_drm(cdf: StepCdf, f: DistortionFunction) -> float:
    """Exact Choquet integral of ``cdf`` over ``[-m_r, m_r]``.

    Integrates ``g(1 - F) - 1`` on the negative half-line and ``g(1 - F)`` on
    the positive one, segment by segment.
    """
    x, F, M = cdf.breakpoints, cdf.values, cdf.m_r
    left = np.concatenate(([-M], x))
    right = np.concatenate((x, [M]))
    level = np.concatenate(([0.0], F))
    height = g_eval(f, 1.0 - level)
    neg_len = np.clip(right, -M, 0.0) - np.clip(left, -M, 0.0)
    pos_len = np.clip(right, 0.0, M) - np.clip(left, 0.0, M)
    return float(np.sum((height - 1.0) * neg_len) + np.sum(height * pos_len))


def _levels_sum(sorted_returns: np.ndarray, levels: np.ndarray, f: DistortionFunction) -> np.ndarray:
    # sum_i R_(i) * (g(1 - c_{i-1}) - g(1 - c_i)) with c_0 = 0 and c_m = 1
    gl = g_eval(f, 1.0 - levels)
    coef = gl[..., :-1] - gl[..., 1:]
    return np.sum(sorted_returns * coef, axis=-1)


def drm_onpolicy_estimate(returns, f: DistortionFunction):
    """Order-statistics DRM estimate from unweighted returns.

    ``returns`` may be stacked: the estimate is taken along the last axis.
    """
    R = np.sort(np.asarray(returns, dtype=float), axis=-1)
    m = R.shape[-1]
    if m == 0:
        raise ValueError("need at least one return")
    levels = np.arange(m + 1) / m
    out = _levels_sum(R, levels, f)
    return float(out) if out.ndim == 0 else out


def drm_offpolicy_estimate(returns, weights, f: DistortionFunction):
    """Order-statistics DRM estimate from behavior returns with importance weights.

    The running weight sums ``min(1, sum_{k<=i} psi_(k) / m)`` set the CDF level
    after the i-th smallest return; the level after the largest return is 1.
    Ties are ordered stably so each weight travels with its own sample.
    ``weights`` may carry leading axes (one row per target policy) that
    broadcast against ``returns``.
    """
    R = np.asarray(returns, dtype=float)
    m = R.shape[-1]
    if m == 0:
        raise ValueError("need at least one return")
    w = _check_weights(weights, m)
    R, w = np.broadcast_arrays(R, w)
    order = np.argsort(R, axis=-1, kind="stable")
    Rs = np.take_along_axis(R, order, axis=-1)
    ws = np.take_along_axis(w, order, axis=-1)
    inner = np.minimum(1.0, np.cumsum(ws[..., :-1], axis=-1) / m)
    zeros = np.zeros(inner.shape[:-1] + (1,))
    levels = np.concatenate((zeros, inner, zeros + 1.0), axis=-1)
    out = _levels_sum(Rs, levels, f)
    return float(out) if out.ndim == 0 else out
