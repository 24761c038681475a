"""Finite episodic MDPs: specification, validation, simulation, returns.

State 0 is the absorbing terminal state. Rewards live on transition entries
so they may depend on (s, a, s').
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

TERMINAL = 0
PROB_TOL = 1e-12

_SPEC_FIELDS = {"num_states", "num_actions", "r_max", "gamma", "start_state", "horizon_cap", "transitions"}
_TRANSITION_FIELDS = {"s", "a", "next", "p", "r"}


class MdpFormatError(ValueError):
    """Raised when an MDP spec file is malformed."""


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    next: int
    p: float
    r: float


@dataclass(frozen=True)
class MdpSpec:
    num_states: int
    num_actions: int
    transitions: tuple[Transition, ...]
    r_max: float
    start_state: int
    gamma: float
    horizon_cap: int

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))

    @property
    def m_r(self) -> float:
        """Bound on the magnitude of any discounted return."""
        return self.r_max / (1.0 - self.gamma)

    @property
    def dim(self) -> int:
        return self.num_states * self.num_actions

    @cached_property
    def _dense(self) -> tuple[np.ndarray, np.ndarray]:
        S, A = self.num_states, self.num_actions
        P = np.zeros((S, A, S))
        R = np.zeros((S, A, S))
        for t in self.transitions:
            P[t.s, t.a, t.next] += t.p
            R[t.s, t.a, t.next] = t.r
        return P, R

    @property
    def transition_matrix(self) -> np.ndarray:
        """Dense P[s, a, s'] (read-only view)."""
        P = self._dense[0].view()
        P.flags.writeable = False
        return P

    @property
    def reward_matrix(self) -> np.ndarray:
        """Dense r[s, a, s'] (read-only view)."""
        R = self._dense[1].view()
        R.flags.writeable = False
        return R

    @cached_property
    def _next_state_cdf(self) -> np.ndarray:
        return _inverse_cdf_table(self._dense[0])

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "r_max": self.r_max,
            "gamma": self.gamma,
            "start_state": self.start_state,
            "horizon_cap": self.horizon_cap,
            "transitions": [
                {"s": t.s, "a": t.a, "next": t.next, "p": t.p, "r": t.r} for t in self.transitions
            ],
        }


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class Step:
    state: int
    action: int
    next_state: int
    reward: float


@dataclass(frozen=True)
class Episode:
    steps: tuple[Step, ...]
    terminated: bool

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([st.reward for st in self.steps], dtype=float)


@dataclass(frozen=True, eq=False)
class EpisodeBatch:
    """Padded arrays for many episodes; entries past ``lengths[i]`` are -1 / 0."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    lengths: np.ndarray
    terminated: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def returns(self, gamma: float) -> np.ndarray:
        return _discounted_sum(self.rewards, gamma)

    @property
    def truncated_fraction(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.mean(~self.terminated))

    def episode(self, i: int) -> Episode:
        n = int(self.lengths[i])
        steps = tuple(
            Step(int(self.states[i, t]), int(self.actions[i, t]), int(self.next_states[i, t]), float(self.rewards[i, t]))
            for t in range(n)
        )
        return Episode(steps, bool(self.terminated[i]))

    def visit_counts(self, num_states: int, num_actions: int) -> np.ndarray:
        """Number of times each flattened (s, a) pair occurs in each episode, shape (B, S*A)."""
        B, H = self.states.shape
        counts = np.zeros((B, num_states * num_actions))
        mask = self.states >= 0
        rows = np.broadcast_to(np.arange(B)[:, None], (B, H))[mask]
        flat = self.states[mask] * num_actions + self.actions[mask]
        np.add.at(counts, (rows, flat), 1.0)
        return counts


def validate_mdp(spec: MdpSpec) -> ValidationReport:
    report = ValidationReport()
    v = report.violations
    S, A = spec.num_states, spec.num_actions
    if S < 1:
        v.append(f"num_states must be positive, got {S}")
    if A < 1:
        v.append(f"num_actions must be positive, got {A}")
    if not spec.r_max > 0:
        v.append(f"r_max must be positive, got {spec.r_max}")
    if not 0.0 < spec.gamma < 1.0:
        v.append(f"gamma must lie in (0, 1), got {spec.gamma}")
    if spec.horizon_cap < 1:
        v.append(f"horizon_cap must be positive, got {spec.horizon_cap}")
    if not 0 <= spec.start_state < S:
        v.append(f"start_state {spec.start_state} out of range")
    if v:
        return report

    sums = np.zeros((S, A))
    seen = set()
    for t in spec.transitions:
        loc = f"(s={t.s},a={t.a})"
        if not (0 <= t.s < S and 0 <= t.a < A and 0 <= t.next < S):
            v.append(f"index out of range at {loc} -> next={t.next}")
            continue
        if t.s == TERMINAL:
            v.append(f"terminal state has outgoing transition at {loc}")
            continue
        if (t.s, t.a, t.next) in seen:
            v.append(f"duplicate transition to next={t.next} at {loc}")
        seen.add((t.s, t.a, t.next))
        if not np.isfinite(t.p) or t.p < 0:
            v.append(f"negative or non-finite probability {t.p} at {loc}")
        if not np.isfinite(t.r) or abs(t.r) > spec.r_max:
            v.append(f"reward bound violated: |{t.r}| > r_max={spec.r_max} at {loc}")
        sums[t.s, t.a] += t.p
    for s in range(1, S):
        for a in range(A):
            if abs(sums[s, a] - 1.0) > PROB_TOL:
                v.append(f"probabilities sum {sums[s, a]:.12g} at (s={s},a={a})")
    return report


def mdp_from_dict(data: dict) -> MdpSpec:
    if not isinstance(data, dict):
        raise MdpFormatError("MDP spec must be a JSON object")
    unknown = set(data) - _SPEC_FIELDS
    if unknown:
        raise MdpFormatError(f"unknown MDP fields: {sorted(unknown)}")
    missing = _SPEC_FIELDS - set(data)
    if missing:
        raise MdpFormatError(f"missing MDP fields: {sorted(missing)}")
    transitions = []
    for k, entry in enumerate(data["transitions"]):
        if not isinstance(entry, dict) or set(entry) != _TRANSITION_FIELDS:
            got = sorted(entry) if isinstance(entry, dict) else type(entry).__name__
            raise MdpFormatError(f"transition {k} must have exactly fields {sorted(_TRANSITION_FIELDS)}, got {got}")
        transitions.append(
            Transition(int(entry["s"]), int(entry["a"]), int(entry["next"]), float(entry["p"]), float(entry["r"]))
        )
    return MdpSpec(
        num_states=int(data["num_states"]),
        num_actions=int(data["num_actions"]),
        transitions=tuple(transitions),
        r_max=float(data["r_max"]),
        start_state=int(data["start_state"]),
        gamma=float(data["gamma"]),
        horizon_cap=int(data["horizon_cap"]),
    )


def load_mdp(path: str | Path) -> MdpSpec:
    with open(path) as fh:
        return mdp_from_dict(json.load(fh))


def bundled_mdp_path(name: str) -> Path:
    """Path of a desk MDP shipped with the package (bandit, two_state, layered_chain, symmetric)."""
    p = Path(__file__).parent / "desk_mdps" / f"{name}.json"
    if not p.exists():
        raise FileNotFoundError(f"no bundled MDP named {name!r}")
    return p


def load_bundled_mdp(name: str) -> MdpSpec:
    return load_mdp(bundled_mdp_path(name))


def _inverse_cdf_table(probs: np.ndarray) -> np.ndarray:
    """Cumulative table for inverse-CDF sampling along the last axis.

    Entries from the last positive-probability index onward are set to 1 so a
    uniform draw in [0, 1) can never land on a zero-probability tail.
    """
    cdf = np.cumsum(probs, axis=-1)
    positive = probs > 0
    last = probs.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    idx = np.arange(probs.shape[-1])
    cdf = np.where(idx >= last[..., None], 1.0, cdf)
    return cdf


def _draw(cdf_row: np.ndarray, u) -> np.ndarray:
    # index j with cdf[j-1] <= u < cdf[j]; zero-width bins are never chosen
    return np.sum(cdf_row <= np.asarray(u)[..., None], axis=-1)


def sample_next_state(spec: MdpSpec, s: int, a: int, rng: np.random.Generator) -> int:
    return int(_draw(spec._next_state_cdf[s, a], rng.random()))


def simulate_episode(
    spec: MdpSpec,
    action_sampler: Callable[[int], int],
    rng: np.random.Generator,
) -> Episode:
    """Roll out one episode from ``start_state``.

    ``action_sampler`` maps a state to an action; it owns any randomness it
    needs. Transitions consume ``rng``. Stops on entering state 0 or after
    ``horizon_cap`` steps (then ``terminated`` is False).
    """
    _, R = spec._dense
    s = spec.start_state
    steps = []
    terminated = s == TERMINAL
    while not terminated and len(steps) < spec.horizon_cap:
        a = int(action_sampler(s))
        nxt = sample_next_state(spec, s, a, rng)
        steps.append(Step(s, a, nxt, float(R[s, a, nxt])))
        s = nxt
        terminated = s == TERMINAL
    return Episode(tuple(steps), terminated)


def simulate_batch(
    spec: MdpSpec,
    policy_probs: np.ndarray,
    uniforms: np.ndarray,
    policy_index: np.ndarray | None = None,
) -> EpisodeBatch:
    """Vectorized rollout of ``B = uniforms.shape[0]`` episodes.

    ``policy_probs`` has shape (K, S, A) (or (S, A) for a single policy);
    episode ``b`` follows policy ``policy_index[b]``. ``uniforms`` has shape
    (B, horizon_cap, 2): ``[b, t, 0]`` drives the action draw and ``[b, t, 1]``
    the next-state draw at step t, so each episode's path depends only on its
    own slice.
    """
    probs = np.asarray(policy_probs, dtype=float)
    if probs.ndim == 2:
        probs = probs[None]
    B, H = uniforms.shape[0], spec.horizon_cap
    if uniforms.shape[1] < H or uniforms.shape[2] != 2:
        raise ValueError(f"uniforms must have shape (B, {H}, 2), got {uniforms.shape}")
    if policy_index is None:
        policy_index = np.zeros(B, dtype=np.intp)
    pi_cdf = _inverse_cdf_table(probs)
    p_cdf = spec._next_state_cdf
    _, R = spec._dense

    states = np.full((B, H), -1, dtype=np.intp)
    actions = np.full((B, H), -1, dtype=np.intp)
    nexts = np.full((B, H), -1, dtype=np.intp)
    rewards = np.zeros((B, H))
    lengths = np.zeros(B, dtype=np.intp)

    s = np.full(B, spec.start_state, dtype=np.intp)
    live = np.flatnonzero(s != TERMINAL)
    for t in range(H):
        if live.size == 0:
            break
        sl = s[live]
        a = _draw(pi_cdf[policy_index[live], sl], uniforms[live, t, 0])
        nx = _draw(p_cdf[sl, a], uniforms[live, t, 1])
        states[live, t] = sl
        actions[live, t] = a
        nexts[live, t] = nx
        rewards[live, t] = R[sl, a, nx]
        lengths[live] += 1
        s[live] = nx
        live = live[nx != TERMINAL]
    terminated = s == TERMINAL
    return EpisodeBatch(states, actions, nexts, rewards, lengths, terminated)


def sample_batch(
    spec: MdpSpec,
    policy_probs: np.ndarray,
    n_episodes: int,
    rng: np.random.Generator,
) -> EpisodeBatch:
    """Simulate ``n_episodes`` episodes under one (S, A) probability table."""
    u = rng.random((n_episodes, spec.horizon_cap, 2))
    return simulate_batch(spec, policy_probs, u)


def _discounted_sum(rewards: np.ndarray, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    disc = gamma ** np.arange(rewards.shape[-1], dtype=float)
    return rewards @ disc


def discounted_return(ep: Episode | Sequence[float], gamma: float) -> float:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    rewards = ep.rewards if isinstance(ep, Episode) else np.asarray(ep, dtype=float)
    if rewards.size == 0:
        return 0.0
    return float(_discounted_sum(rewards, gamma))
