"""Tabular softmax policies, behavior policies and importance-sampling ratios."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import TERMINAL, Episode, EpisodeBatch, MdpSpec

PROB_FLOOR = 1e-300
UNIT_TOL = 1e-12


class SupportViolation(ValueError):
    """Target policy puts mass on an action the behavior policy never takes."""

    def __init__(self, state: int, action: int, episode: int | None = None):
        self.state, self.action, self.episode = state, action, episode
        where = f"(s={state},a={action})"
        if episode is not None:
            where += f" in episode {episode}"
        super().__init__(f"behavior probability is 0 where target is positive at {where}")


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Flat parameter vector, row-major by state: ``theta[s * num_actions + a]``."""

    theta: np.ndarray
    num_actions: int

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.size % self.num_actions:
            raise ValueError(f"len(theta)={theta.size} is not a multiple of num_actions={self.num_actions}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, mdp: MdpSpec) -> "PolicyParams":
        return cls(np.zeros(mdp.dim), mdp.num_actions)

    @property
    def dim(self) -> int:
        return self.theta.size

    @property
    def num_states(self) -> int:
        return self.theta.size // self.num_actions

    def table(self) -> np.ndarray:
        """Action probabilities for every state, shape (S, A)."""
        return softmax_table(self.theta, self.num_actions)

    def to_json(self) -> str:
        return json.dumps([float(x) for x in self.theta])


def softmax_table(theta: np.ndarray, num_actions: int) -> np.ndarray:
    """Row-wise softmax of ``theta`` reshaped to (..., S, A). Works on stacked parameter vectors."""
    theta = np.asarray(theta, dtype=float)
    logits = theta.reshape(*theta.shape[:-1], -1, num_actions)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_table(theta: np.ndarray, num_actions: int) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    logits = theta.reshape(*theta.shape[:-1], -1, num_actions)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_probabilities(params: PolicyParams, s: int) -> np.ndarray:
    if s == TERMINAL:
        raise ValueError("action probabilities are undefined at the terminal state")
    if not 0 <= s < params.num_states:
        raise ValueError(f"state {s} out of range")
    A = params.num_actions
    return softmax_table(params.theta[s * A:(s + 1) * A], A)[0]


def sample_action(params: PolicyParams, s: int, rng: np.random.Generator) -> int:
    p = action_probabilities(params, s)
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    return int(np.sum(cdf <= rng.random()))


def perturb(params: PolicyParams, mu: float, v: np.ndarray, sign: int) -> PolicyParams:
    """Return ``theta + sign * mu * v`` as new parameters."""
    v = np.asarray(v, dtype=float)
    if v.shape != params.theta.shape:
        raise ValueError(f"direction has shape {v.shape}, expected {params.theta.shape}")
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ValueError(f"direction must be a unit vector, got norm {np.linalg.norm(v)!r}")
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign!r}")
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    return PolicyParams(params.theta + sign * mu * v, params.num_actions)


@dataclass(frozen=True, eq=False)
class BehaviorPolicy:
    """Explicit action-probability table; row 0 (terminal) is never used."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("behavior probabilities must be a (num_states, num_actions) table")
        rows = probs[1:]
        if np.any(rows < 0) or not np.all(np.isfinite(rows)):
            raise ValueError("behavior probabilities must be finite and nonnegative")
        bad = np.flatnonzero(np.abs(rows.sum(axis=1) - 1.0) > UNIT_TOL)
        if bad.size:
            s = int(bad[0]) + 1
            raise ValueError(f"behavior probabilities sum {rows[bad[0]].sum():.12g} at state {s}")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, mdp: MdpSpec) -> "BehaviorPolicy":
        return cls(np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions))

    @classmethod
    def from_params(cls, params: PolicyParams) -> "BehaviorPolicy":
        return cls(params.table())

    def check_full_support(self) -> None:
        """Softmax targets are positive everywhere, so b must be too on non-terminal states."""
        zero = np.argwhere(self.probs[1:] <= 0)
        if zero.size:
            s, a = zero[0]
            raise SupportViolation(int(s) + 1, int(a))

    def to_dict(self) -> dict:
        return {str(s): [float(p) for p in self.probs[s]] for s in range(1, self.probs.shape[0])}


def behavior_from_dict(data: dict, num_states: int, num_actions: int) -> BehaviorPolicy:
    """Build from a JSON map ``state -> probability vector``; unlisted states are uniform."""
    probs = np.full((num_states, num_actions), 1.0 / num_actions)
    for key, row in data.items():
        s = int(key)
        if not 1 <= s < num_states:
            raise ValueError(f"behavior policy lists invalid state {key!r}")
        if len(row) != num_actions:
            raise ValueError(f"behavior row for state {s} has {len(row)} entries, expected {num_actions}")
        probs[s] = row
    return BehaviorPolicy(probs)


def load_behavior(path: str | Path, mdp: MdpSpec) -> BehaviorPolicy:
    with open(path) as fh:
        return behavior_from_dict(json.load(fh), mdp.num_states, mdp.num_actions)


def importance_ratio(ep: Episode, target: PolicyParams, behavior: BehaviorPolicy) -> float:
    """Product over the episode of target / behavior action probabilities."""
    pi = target.table()
    psi = 1.0
    for st in ep.steps:
        p, b = pi[st.state, st.action], behavior.probs[st.state, st.action]
        if b <= 0.0 and p > 0.0:
            raise SupportViolation(st.state, st.action)
        psi *= max(p, PROB_FLOOR) / max(b, PROB_FLOOR)
    return psi


def batch_importance_ratios(
    batch: EpisodeBatch,
    thetas: np.ndarray,
    behavior: BehaviorPolicy,
    num_actions: int,
) -> np.ndarray:
    """Ratios for K stacked parameter vectors over B episodes, shape (K, B).

    Evaluated in log space from per-episode (s, a) visit counts.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    S = behavior.probs.shape[0]
    counts = batch.visit_counts(S, num_actions)
    b = behavior.probs.reshape(-1)
    visited_zero = (counts > 0) & (b <= 0)[None, :]
    if visited_zero.any():
        ep, flat = np.argwhere(visited_zero)[0]
        raise SupportViolation(int(flat // num_actions), int(flat % num_actions), int(ep))
    log_b = np.log(np.maximum(b, PROB_FLOOR))
    log_pi = log_softmax_table(thetas, num_actions).reshape(thetas.shape[0], -1)
    return np.exp((log_pi - log_b) @ counts.T)
