"""Two-point smoothed-functional gradient estimates on random unit directions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

_NORM_FLOOR = 1e-12


class EvaluationError(RuntimeError):
    def __init__(self, index: int, sign: int, cause: BaseException):
        self.index, self.sign = index, sign
        super().__init__(f"evaluator failed for direction {index} (sign {sign:+d}): {cause!r}")


@dataclass(frozen=True)
class SfConfig:
    mu: float
    n: int
    d: int

    def __post_init__(self):
        if not 0.0 < self.mu <= 1.0:
            raise ValueError(f"mu must lie in (0, 1], got {self.mu}")
        if self.n < 1:
            raise ValueError(f"n must be positive, got {self.n}")
        if self.d < 1:
            raise ValueError(f"d must be positive, got {self.d}")


@dataclass(frozen=True, eq=False)
class SfEstimate:
    gradient: np.ndarray
    directions: np.ndarray
    plus: np.ndarray
    minus: np.ndarray


def sample_unit_sphere(d: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform draw(s) from the unit sphere in R^d via normalized Gaussians."""
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    shape = (1 if size is None else size, d)
    v = rng.standard_normal(shape)
    norms = np.linalg.norm(v, axis=1)
    while np.any(norms < _NORM_FLOOR):
        bad = norms < _NORM_FLOOR
        v[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(v, axis=1)
    v /= norms[:, None]
    return v[0] if size is None else v


def sf_combine(plus: np.ndarray, minus: np.ndarray, directions: np.ndarray, mu: float) -> np.ndarray:
    """(d/n) * sum_i (plus_i - minus_i) / (2 mu) * v_i, reduced in index order."""
    directions = np.atleast_2d(directions)
    n, d = directions.shape
    coef = (np.asarray(plus, dtype=float) - np.asarray(minus, dtype=float)) / (2.0 * mu)
    return (d / n) * (coef @ directions)


def sf_gradient_estimate(
    evaluate: Callable[[np.ndarray], float],
    theta: np.ndarray,
    cfg: SfConfig,
    rng: np.random.Generator | None = None,
    directions: np.ndarray | None = None,
) -> SfEstimate:
    """Estimate the gradient of ``evaluate`` at ``theta`` from 2n black-box calls.

    Directions are drawn from ``rng`` unless pinned via ``directions``.
    Calls run in order i = 1..n, the +mu point before the -mu point.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (cfg.d,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({cfg.d},)")
    if directions is None:
        if rng is None:
            raise ValueError("need an rng or pinned directions")
        directions = sample_unit_sphere(cfg.d, rng, size=cfg.n)
    else:
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        if directions.shape != (cfg.n, cfg.d):
            raise ValueError(f"directions have shape {directions.shape}, expected {(cfg.n, cfg.d)}")
    plus = np.empty(cfg.n)
    minus = np.empty(cfg.n)
    for i, v in enumerate(directions):
        for sign, out in ((1, plus), (-1, minus)):
            try:
                out[i] = float(evaluate(theta + sign * cfg.mu * v))
            except Exception as exc:
                raise EvaluationError(i, sign, exc) from exc
    grad = sf_combine(plus, minus, directions, cfg.mu)
    return SfEstimate(grad, directions, plus, minus)
