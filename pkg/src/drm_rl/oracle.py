"""Exact ground truth for desk-scale MDPs by path enumeration.

Every (action, next-state) path from the start state is enumerated once per
MDP. A path's probability under a softmax policy is its transition
probability times ``exp(counts @ log_pi)``, where ``counts`` records how often
each (s, a) pair is visited, so re-evaluating at a new theta is a single
matrix product.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .distortion import DistortionFunction
from .estimation import StepCdf, choquet_drm
from .mdp import TERMINAL, MdpSpec
from .policy import PROB_FLOOR, BehaviorPolicy, PolicyParams, log_softmax_table

DEFAULT_PATH_BUDGET = 10**7
RESIDUAL_TOL = 1e-9
ATOM_TOL = 1e-12


class OracleRefusal(RuntimeError):
    """The exact oracle cannot answer (too many paths or unterminated mass)."""


@dataclass(frozen=True, eq=False)
class PathTable:
    counts: np.ndarray      # (P, S*A) visits per path
    log_trans: np.ndarray   # (P,) log of the transition-probability product
    returns: np.ndarray     # (P,)
    alive: np.ndarray       # (P,) still running at the horizon
    order: np.ndarray       # terminated paths sorted by return
    group: np.ndarray       # atom id of each entry in ``order``
    atom_values: np.ndarray


@dataclass(frozen=True, eq=False)
class ExactReturnDistribution:
    values: np.ndarray
    probs: np.ndarray
    residual_mass: float
    m_r: float

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return [(float(v), float(p)) for v, p in zip(self.values, self.probs)]

    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))


def _enumerate(mdp: MdpSpec, horizon: int, budget: int) -> PathTable:
    P, R = mdp.transition_matrix, mdp.reward_matrix
    A, gamma = mdp.num_actions, mdp.gamma
    branches = {
        s: [(a, int(nx), float(np.log(P[s, a, nx])), float(R[s, a, nx]))
            for a in range(A) for nx in np.flatnonzero(P[s, a] > 0)]
        for s in range(1, mdp.num_states)
    }
    rows: list[tuple[tuple[int, ...], float, float, bool]] = []
    # (state, depth, visited flat indices, log prob, return, discount)
    stack = [(mdp.start_state, 0, (), 0.0, 0.0, 1.0)]
    while stack:
        s, depth, visits, logp, G, disc = stack.pop()
        if s == TERMINAL or depth == horizon:
            rows.append((visits, logp, G, s != TERMINAL))
            if len(rows) > budget:
                raise OracleRefusal(f"path budget {budget} exceeded; use Monte Carlo (non-exact) instead")
            continue
        for a, nx, lp, r in reversed(branches[s]):
            stack.append((nx, depth + 1, visits + (s * A + a,), logp + lp, G + disc * r, disc * gamma))

    n = len(rows)
    counts = np.zeros((n, mdp.dim))
    for i, (visits, *_rest) in enumerate(rows):
        for k in visits:
            counts[i, k] += 1.0
    log_trans = np.array([row[1] for row in rows])
    returns = np.array([row[2] for row in rows])
    alive = np.array([row[3] for row in rows], dtype=bool)

    done = np.flatnonzero(~alive)
    order = done[np.argsort(returns[done], kind="stable")]
    vals = returns[order]
    group = np.zeros(order.size, dtype=np.intp)
    starts = [0]
    for j in range(1, order.size):
        if vals[j] - vals[starts[-1]] > ATOM_TOL:
            starts.append(j)
        group[j] = len(starts) - 1
    atom_values = vals[starts] if order.size else np.empty(0)
    return PathTable(counts, log_trans, returns, alive, order, group, atom_values)


@lru_cache(maxsize=32)
def _path_table(mdp: MdpSpec, horizon: int, budget: int) -> PathTable:
    return _enumerate(mdp, horizon, budget)


def _theta_array(theta) -> np.ndarray:
    return theta.theta if isinstance(theta, PolicyParams) else np.asarray(theta, dtype=float)


class ExactOracle:
    """Cached exact evaluations of the return distribution for one MDP."""

    def __init__(self, mdp: MdpSpec, horizon_cap: int | None = None, budget: int = DEFAULT_PATH_BUDGET):
        self.mdp = mdp
        self.horizon_cap = mdp.horizon_cap if horizon_cap is None else int(horizon_cap)
        self.table = _path_table(mdp, self.horizon_cap, budget)

    def path_probs(self, theta) -> np.ndarray:
        theta = _theta_array(theta)
        if theta.shape[-1] != self.mdp.dim:
            raise ValueError(f"theta has dimension {theta.shape[-1]}, MDP needs {self.mdp.dim}")
        log_pi = log_softmax_table(theta, self.mdp.num_actions).reshape(*theta.shape[:-1], -1)
        return np.exp(self.table.log_trans + log_pi @ self.table.counts.T)

    def distribution(self, theta) -> ExactReturnDistribution:
        t = self.table
        p = self.path_probs(theta)
        atom_p = np.bincount(t.group, weights=p[t.order], minlength=t.atom_values.size)
        keep = atom_p > 0
        residual = float(p[t.alive].sum())
        return ExactReturnDistribution(t.atom_values[keep], atom_p[keep], residual, self.mdp.m_r)

    def drm(self, theta, f: DistortionFunction) -> float:
        return exact_drm(self.distribution(theta), f)

    def gradient(self, theta, f: DistortionFunction, h: float = 1e-5) -> np.ndarray:
        theta = _theta_array(theta)
        d = theta.size
        grad = np.empty(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            grad[j] = (self.drm(theta + e, f) - self.drm(theta - e, f)) / (2.0 * h)
        return grad

    def max_importance_ratio(self, theta, behavior: BehaviorPolicy) -> float:
        t = self.table
        b = behavior.probs.reshape(-1)
        supported = ~np.any(t.counts[:, b <= 0] > 0, axis=1)
        if not supported.any():
            raise OracleRefusal("no path lies in the behavior policy's support")
        log_pi = log_softmax_table(_theta_array(theta), self.mdp.num_actions).reshape(-1)
        log_ratio = t.counts[supported] @ (log_pi - np.log(np.maximum(b, PROB_FLOOR)))
        return float(np.exp(log_ratio.max()))


def enumerate_return_distribution(
    mdp: MdpSpec,
    theta,
    horizon_cap: int | None = None,
    budget: int = DEFAULT_PATH_BUDGET,
) -> ExactReturnDistribution:
    return ExactOracle(mdp, horizon_cap, budget).distribution(theta)


def exact_drm(dist: ExactReturnDistribution, f: DistortionFunction) -> float:
    if dist.residual_mass > RESIDUAL_TOL:
        raise OracleRefusal(
            f"residual mass {dist.residual_mass:.3g} not terminated within the horizon; the CDF is not fully known"
        )
    order = np.argsort(dist.values, kind="stable")
    x, p = dist.values[order], dist.probs[order]
    # merge equal returns so breakpoints are strictly increasing
    last = np.append(x[1:] != x[:-1], True)
    F = np.minimum(np.cumsum(p), 1.0)[last]
    F[-1] = 1.0
    return choquet_drm(StepCdf(x[last], F, dist.m_r), f)


def finite_difference_gradient(mdp: MdpSpec, theta, f: DistortionFunction, h: float = 1e-5) -> np.ndarray:
    return ExactOracle(mdp).gradient(theta, f, h)


def max_importance_ratio(mdp: MdpSpec, theta, behavior: BehaviorPolicy, horizon_cap: int | None = None) -> float:
    return ExactOracle(mdp, horizon_cap).max_importance_ratio(theta, behavior)
