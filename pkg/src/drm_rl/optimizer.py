"""DRM gradient ascent with smoothed-functional gradients (on- and off-policy).

Randomness is keyed by position, never by call order: iteration k draws its
directions from the stream ``(master_seed, k, 0)`` and its episode uniforms
from ``(master_seed, k, 1)``. Episode j of direction i and sign s reads the
uniform slice ``[i, s, j]``, so splitting the work across workers cannot
change any result.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from .distortion import DistortionFunction
from .estimation import drm_offpolicy_estimate, drm_onpolicy_estimate
from .mdp import MdpSpec, simulate_batch
from .oracle import ExactOracle
from .policy import BehaviorPolicy, PolicyParams, batch_importance_ratios, softmax_table
from .sf_gradient import SfConfig, sample_unit_sphere, sf_combine

_DIRECTIONS, _EPISODES = 0, 1
_SELECT_KEY = 2**32 - 1


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"non-finite parameter update at iteration {iteration}")


def substream(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class OptConfig:
    n_iterations: int
    step_size: float
    sf: SfConfig
    episodes_per_eval: int
    distortion: DistortionFunction
    mode: Literal["on_policy", "off_policy"] = "on_policy"
    theory_preset: bool = False
    master_seed: int = 0

    def __post_init__(self):
        N = self.n_iterations
        if N < 0:
            raise ValueError(f"n_iterations must be nonnegative, got {N}")
        if self.episodes_per_eval < 1:
            raise ValueError("episodes_per_eval must be positive")
        if self.mode not in ("on_policy", "off_policy"):
            raise ValueError(f"mode must be on_policy or off_policy, got {self.mode!r}")
        if self.theory_preset:
            if N < 1:
                raise ValueError("the theory preset needs n_iterations >= 1")
            object.__setattr__(self, "step_size", 1.0 / math.sqrt(N))
            object.__setattr__(self, "sf", SfConfig(mu=N ** -0.25, n=N, d=self.sf.d))

    @classmethod
    def theory(cls, n_iterations: int, d: int, episodes_per_eval: int, distortion: DistortionFunction, **kw):
        """Step size 1/sqrt(N), smoothing N^(-1/4) and N directions per iteration."""
        return cls(n_iterations, 0.0, SfConfig(1.0, 1, d), episodes_per_eval, distortion, theory_preset=True, **kw)

    def to_dict(self) -> dict:
        return {
            "n_iterations": self.n_iterations,
            "step_size": self.step_size,
            "mu": self.sf.mu,
            "n_directions": self.sf.n,
            "d": self.sf.d,
            "episodes_per_eval": self.episodes_per_eval,
            "distortion": self.distortion.to_config(),
            "mode": self.mode,
            "theory_preset": self.theory_preset,
            "master_seed": self.master_seed,
        }


@dataclass
class IterationRecord:
    iteration: int
    grad_est_norm: float
    mean_drm_plus: float
    mean_drm_minus: float
    episodes: int
    episodes_cum: int
    truncated_frac: float
    wall_time: float = field(compare=False)


@dataclass
class OptRun:
    config: OptConfig
    iterates: list[np.ndarray]
    records: list[IterationRecord] = field(default_factory=list)
    R_index: int | None = None

    @property
    def theta_R(self) -> np.ndarray:
        if self.R_index is None:
            raise ValueError("no output iterate: the run has no iterations beyond theta_0")
        return self.iterates[self.R_index]

    @property
    def episodes_total(self) -> int:
        return self.records[-1].episodes_cum if self.records else 0


def select_random_iterate(run: OptRun, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """Draw R uniformly from {1, ..., N} and record it on ``run``."""
    N = len(run.iterates) - 1
    if N < 1:
        raise ValueError("cannot select an output iterate from an empty range (N = 0)")
    run.R_index = int(rng.integers(1, N + 1))
    return run.R_index, run.iterates[run.R_index]


def _start(cfg: OptConfig, mdp: MdpSpec, theta0) -> np.ndarray:
    if theta0 is None:
        return np.zeros(mdp.dim)
    theta = theta0.theta if isinstance(theta0, PolicyParams) else np.asarray(theta0, dtype=float)
    if theta.shape != (mdp.dim,):
        raise ValueError(f"theta0 has shape {theta.shape}, MDP needs ({mdp.dim},)")
    return theta.astype(float).copy()


def _perturbed(theta: np.ndarray, mu: float, directions: np.ndarray) -> np.ndarray:
    # rows 2i and 2i+1 are theta + mu v_i and theta - mu v_i
    signs = np.array([1.0, -1.0])
    return (theta[None, None, :] + mu * signs[None, :, None] * directions[:, None, :]).reshape(-1, theta.size)


def _run(cfg: OptConfig, mdp: MdpSpec, theta0, estimate_iteration) -> OptRun:
    if cfg.sf.d != mdp.dim:
        raise ValueError(f"config dimension d={cfg.sf.d} does not match MDP dimension {mdp.dim}")
    theta = _start(cfg, mdp, theta0)
    run = OptRun(cfg, [theta.copy()])
    episodes_cum = 0
    for k in range(cfg.n_iterations):
        t0 = time.perf_counter()
        directions = sample_unit_sphere(cfg.sf.d, substream(cfg.master_seed, k, _DIRECTIONS), size=cfg.sf.n)
        plus, minus, n_eps, trunc = estimate_iteration(k, theta, directions)
        grad = sf_combine(plus, minus, directions, cfg.sf.mu)
        new = theta + cfg.step_size * grad
        if not np.all(np.isfinite(new)):
            raise DivergenceError(k)
        theta = new
        episodes_cum += n_eps
        run.iterates.append(theta.copy())
        run.records.append(IterationRecord(
            iteration=k,
            grad_est_norm=float(np.linalg.norm(grad)),
            mean_drm_plus=float(np.mean(plus)),
            mean_drm_minus=float(np.mean(minus)),
            episodes=n_eps,
            episodes_cum=episodes_cum,
            truncated_frac=trunc,
            wall_time=time.perf_counter() - t0,
        ))
    if cfg.n_iterations >= 1:
        select_random_iterate(run, substream(cfg.master_seed, _SELECT_KEY))
    return run


def drm_onp_sf(cfg: OptConfig, mdp: MdpSpec, theta0=None) -> OptRun:
    """On-policy run: 2m fresh episodes per direction, 2mn per iteration."""
    if cfg.mode != "on_policy":
        raise ValueError("drm_onp_sf needs mode='on_policy'")
    n, m, H = cfg.sf.n, cfg.episodes_per_eval, mdp.horizon_cap
    policy_index = np.repeat(np.arange(2 * n), m)

    def estimate_iteration(k, theta, directions):
        probs = softmax_table(_perturbed(theta, cfg.sf.mu, directions), mdp.num_actions)
        u = substream(cfg.master_seed, k, _EPISODES).random((n, 2, m, H, 2)).reshape(2 * n * m, H, 2)
        batch = simulate_batch(mdp, probs, u, policy_index)
        est = drm_onpolicy_estimate(batch.returns(mdp.gamma).reshape(n, 2, m), cfg.distortion)
        return est[:, 0], est[:, 1], len(batch), batch.truncated_fraction

    return _run(cfg, mdp, theta0, estimate_iteration)


def drm_offp_sf(cfg: OptConfig, mdp: MdpSpec, behavior: BehaviorPolicy, theta0=None) -> OptRun:
    """Off-policy run: m behavior episodes per iteration, reweighted for all 2n perturbed targets."""
    if cfg.mode != "off_policy":
        raise ValueError("drm_offp_sf needs mode='off_policy'")
    if behavior.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("behavior policy shape does not match the MDP")
    behavior.check_full_support()
    n, m, H = cfg.sf.n, cfg.episodes_per_eval, mdp.horizon_cap

    def estimate_iteration(k, theta, directions):
        u = substream(cfg.master_seed, k, _EPISODES).random((m, H, 2))
        batch = simulate_batch(mdp, behavior.probs, u)
        psi = batch_importance_ratios(batch, _perturbed(theta, cfg.sf.mu, directions), behavior, mdp.num_actions)
        est = drm_offpolicy_estimate(batch.returns(mdp.gamma), psi, cfg.distortion).reshape(n, 2)
        return est[:, 0], est[:, 1], len(batch), batch.truncated_fraction

    return _run(cfg, mdp, theta0, estimate_iteration)


def run_optimizer(cfg: OptConfig, mdp: MdpSpec, theta0=None, behavior: BehaviorPolicy | None = None) -> OptRun:
    if cfg.mode == "off_policy":
        if behavior is None:
            raise ValueError("off-policy mode needs a behavior policy")
        return drm_offp_sf(cfg, mdp, behavior, theta0)
    return drm_onp_sf(cfg, mdp, theta0)


@dataclass
class StationarityReport:
    grad_norm_sq_at_R: float
    grad_norm_sq_at_0: float
    mean_grad_norm_sq: float
    grad_norm_sq: list[float]
    R_index: int | None

    def to_dict(self) -> dict:
        return {
            "grad_norm_sq_at_R": self.grad_norm_sq_at_R,
            "grad_norm_sq_at_0": self.grad_norm_sq_at_0,
            "mean_grad_norm_sq": self.mean_grad_norm_sq,
            "R_index": self.R_index,
        }


def stationarity_report(run: OptRun, mdp: MdpSpec, f: DistortionFunction, fd_step: float = 1e-5) -> StationarityReport:
    """Exact squared gradient norms along a run.

    ``mean_grad_norm_sq`` averages over theta_0 .. theta_{N-1}, which equals the
    expectation of the squared norm at a uniformly drawn output iterate up to
    the index shift used in the convergence analysis. Raises
    :class:`~drm_rl.oracle.OracleRefusal` when the MDP is too large.
    """
    oracle = ExactOracle(mdp)
    norms = [float(np.sum(oracle.gradient(th, f, fd_step) ** 2)) for th in run.iterates]
    N = len(run.iterates) - 1
    mean = float(np.mean(norms[:N])) if N >= 1 else norms[0]
    at_R = norms[run.R_index] if run.R_index is not None else float("nan")
    return StationarityReport(at_R, norms[0], mean, norms, run.R_index)


def with_seed(cfg: OptConfig, seed: int) -> OptConfig:
    return replace(cfg, master_seed=seed)
