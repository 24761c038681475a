import numpy as np
import pytest

from drm_rl.distortion import DistortionFunction
from drm_rl.estimation import drm_offpolicy_estimate, drm_onpolicy_estimate
from drm_rl.mdp import sample_batch
from drm_rl.optimizer import (
    DivergenceError,
    OptConfig,
    OptRun,
    drm_offp_sf,
    drm_onp_sf,
    run_optimizer,
    select_random_iterate,
    stationarity_report,
    with_seed,
)
from drm_rl.oracle import ExactOracle
from drm_rl.policy import BehaviorPolicy, SupportViolation, batch_importance_ratios, softmax_table
from drm_rl.sf_gradient import SfConfig, sample_unit_sphere

IDENT = DistortionFunction("identity")
DP2 = DistortionFunction("dual_power", 2)


def config(mdp, N=5, alpha=0.1, mu=0.1, n=3, m=4, mode="on_policy", seed=0, f=IDENT):
    return OptConfig(N, alpha, SfConfig(mu, n, mdp.dim), m, f, mode=mode, master_seed=seed)


def test_zero_iterations_has_no_output_iterate(two_state):
    run = drm_onp_sf(config(two_state, N=0), two_state)
    assert len(run.iterates) == 1 and run.R_index is None
    with pytest.raises(ValueError, match="no output iterate"):
        run.theta_R
    with pytest.raises(ValueError, match="empty range"):
        select_random_iterate(run, np.random.default_rng(0))


def test_zero_step_size_keeps_theta(two_state):
    theta0 = np.random.default_rng(0).normal(size=two_state.dim)
    run = drm_onp_sf(config(two_state, N=6, alpha=0.0), two_state, theta0)
    for th in run.iterates:
        np.testing.assert_array_equal(th, theta0)
    rep = stationarity_report(run, two_state, IDENT)
    assert rep.grad_norm_sq_at_R == rep.grad_norm_sq_at_0


def test_theory_preset_overrides_hyperparameters(two_state):
    cfg = OptConfig.theory(16, two_state.dim, 5, IDENT)
    assert (cfg.step_size, cfg.sf.mu, cfg.sf.n) == (0.25, 0.5, 16)
    cfg = OptConfig(100, 9.0, SfConfig(0.9, 3, two_state.dim), 5, IDENT, theory_preset=True)
    assert (cfg.step_size, cfg.sf.mu, cfg.sf.n) == pytest.approx((0.1, 100**-0.25, 100))


def test_select_random_iterate_single_iteration():
    run = OptRun(None, [np.zeros(2), np.ones(2)])
    for seed in range(20):
        assert select_random_iterate(run, np.random.default_rng(seed))[0] == 1


def test_select_random_iterate_is_uniform():
    run = OptRun(None, [np.zeros(1)] * 5)
    rng = np.random.default_rng(0)
    idx = np.array([select_random_iterate(run, rng)[0] for _ in range(10_000)])
    freq = np.bincount(idx, minlength=5)[1:] / idx.size
    assert np.all(np.abs(freq - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / idx.size))
    again = [select_random_iterate(run, np.random.default_rng(7))[0] for _ in range(3)]
    assert len(set(again)) == 1


def test_episode_counters(two_state):
    N, n, m = 7, 4, 5
    on = drm_onp_sf(config(two_state, N=N, n=n, m=m), two_state)
    assert [r.episodes for r in on.records] == [2 * m * n] * N
    assert on.episodes_total == 2 * m * n * N
    off = drm_offp_sf(config(two_state, N=N, n=50, m=m, mode="off_policy"), two_state, BehaviorPolicy.uniform(two_state))
    assert [r.episodes for r in off.records] == [m] * N
    assert [r.episodes_cum for r in off.records] == [m * (k + 1) for k in range(N)]


def test_runs_are_reproducible_and_seed_dependent(two_state):
    cfg = config(two_state, N=10)
    a, b = drm_onp_sf(cfg, two_state), drm_onp_sf(cfg, two_state)
    np.testing.assert_array_equal(np.array(a.iterates), np.array(b.iterates))
    assert a.R_index == b.R_index
    c = drm_onp_sf(with_seed(cfg, 1), two_state)
    assert not np.array_equal(np.array(a.iterates), np.array(c.iterates))


def test_prefix_of_longer_run_is_unchanged(two_state):
    short = drm_onp_sf(config(two_state, N=4), two_state)
    long = drm_onp_sf(config(two_state, N=9), two_state)
    np.testing.assert_array_equal(np.array(short.iterates), np.array(long.iterates[:5]))


def test_offpolicy_with_matching_behavior_tracks_onpolicy(two_state):
    theta = np.random.default_rng(0).normal(size=two_state.dim)
    behavior = BehaviorPolicy(softmax_table(theta, 2))
    mu = 1e-8
    v = sample_unit_sphere(two_state.dim, np.random.default_rng(1), size=5)
    batch = sample_batch(two_state, behavior.probs, 200, np.random.default_rng(2))
    G = batch.returns(two_state.gamma)
    targets = np.concatenate([theta + mu * v, theta - mu * v])
    psi = batch_importance_ratios(batch, targets, behavior, 2)
    for f in (IDENT, DP2):
        off = drm_offpolicy_estimate(G, psi, f)
        assert np.all(np.abs(off - drm_onpolicy_estimate(G, f)) <= 1e-6)


def test_offpolicy_requires_full_support(two_state):
    bad = BehaviorPolicy(np.array([[0.5, 0.5], [1.0, 0.0], [0.5, 0.5]]))
    with pytest.raises(SupportViolation):
        drm_offp_sf(config(two_state, mode="off_policy"), two_state, bad)
    with pytest.raises(ValueError, match="behavior"):
        run_optimizer(config(two_state, mode="off_policy"), two_state)


def test_mode_and_dimension_mismatch(two_state, bandit):
    with pytest.raises(ValueError):
        drm_onp_sf(config(two_state, mode="off_policy"), two_state)
    with pytest.raises(ValueError, match="dimension"):
        drm_onp_sf(config(two_state), bandit)
    with pytest.raises(ValueError):
        drm_onp_sf(config(two_state), two_state, np.zeros(3))


def test_divergence_is_reported(two_state):
    with pytest.raises(DivergenceError) as err:
        drm_onp_sf(config(two_state, N=3, alpha=np.inf), two_state)
    assert err.value.iteration == 0


def _improvement_fraction(mdp, mode, f, N=100, m=10, seeds=20):
    oracle = ExactOracle(mdp)
    behavior = BehaviorPolicy.uniform(mdp)
    wins = 0
    for s in range(seeds):
        run = run_optimizer(OptConfig.theory(N, mdp.dim, m, f, master_seed=s, mode=mode), mdp, None, behavior)
        wins += oracle.drm(run.theta_R, f) > oracle.drm(run.iterates[0], f)
    return wins / seeds


def test_onpolicy_improves_two_state(two_state):
    assert _improvement_fraction(two_state, "on_policy", IDENT) >= 0.9


def test_offpolicy_improves_two_state_under_uniform_behavior(two_state):
    assert _improvement_fraction(two_state, "off_policy", IDENT) >= 0.9


def test_stationarity_at_symmetric_optimum(symmetric):
    run = drm_onp_sf(config(symmetric, N=10, alpha=0.5), symmetric)
    rep = stationarity_report(run, symmetric, IDENT)
    assert rep.grad_norm_sq_at_R <= 1e-6
    assert max(rep.grad_norm_sq) <= 1e-6


def test_stationarity_report_fields(bandit):
    run = drm_onp_sf(config(bandit, N=5), bandit)
    rep = stationarity_report(run, bandit, DP2)
    assert len(rep.grad_norm_sq) == 6
    assert rep.mean_grad_norm_sq == pytest.approx(np.mean(rep.grad_norm_sq[:5]))
    assert rep.grad_norm_sq_at_R == rep.grad_norm_sq[run.R_index]
    assert set(rep.to_dict()) == {"grad_norm_sq_at_R", "grad_norm_sq_at_0", "mean_grad_norm_sq", "R_index"}
