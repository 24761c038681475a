"""End-to-end acceptance checks; one PASS/FAIL line per criterion is printed in the pytest summary."""

import json
import math
import time

import numpy as np
import pytest

from drm_rl.cli import main
from drm_rl.distortion import DistortionFunction
from drm_rl.estimation import (
    ReturnBatch,
    choquet_drm,
    drm_offpolicy_estimate,
    drm_onpolicy_estimate,
    edf,
    weighted_cdf,
)
from drm_rl.mdp import simulate_batch
from drm_rl.optimizer import OptConfig, drm_offp_sf, drm_onp_sf, stationarity_report, substream
from drm_rl.oracle import ExactOracle
from drm_rl.policy import BehaviorPolicy, batch_importance_ratios, softmax_table
from drm_rl.sf_gradient import SfConfig, sf_gradient_estimate

DISTORTIONS = [
    DistortionFunction("identity"),
    DistortionFunction("dual_power", 2),
    DistortionFunction("dual_power", 5),
    DistortionFunction("quadratic", 0.6),
    DistortionFunction("exponential", 3.0),
    DistortionFunction("square_root", 4.0),
    DistortionFunction("logarithmic", 2.0),
]


def _random_batch(rng, m_r):
    m = int(rng.integers(1, 201))
    if rng.random() < 0.5:
        pool = rng.uniform(-m_r, m_r, size=int(rng.integers(1, 6)))
        R = rng.choice(pool, size=m)
    else:
        R = rng.uniform(-m_r, m_r, size=m)
    w = rng.choice([0.0, 0.5, 1.0, 1.8, 3.0], size=m) * rng.uniform(0.5, 1.5, size=m)
    w[rng.random(m) < 0.15] = 0.0
    return R, w


@pytest.mark.criterion(1, "order-statistics formulas equal Choquet integrals of the step CDFs (1e-10)")
def test_order_statistics_equivalence(record_property):
    rng = np.random.default_rng(20240601)
    m_r = 10.0
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        R, w = _random_batch(rng, m_r)
        f = DISTORTIONS[int(rng.integers(len(DISTORTIONS)))]
        on_err = abs(drm_onpolicy_estimate(R, f) - choquet_drm(edf(ReturnBatch(R, m_r)), f))
        off_err = abs(drm_offpolicy_estimate(R, w, f) - choquet_drm(weighted_cdf(ReturnBatch(R, m_r, w)), f))
        worst = max(worst, on_err, off_err)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |diff| {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-10
    assert elapsed < 10


@pytest.mark.criterion(2, "identity distortion gives the sample mean; unit weights give the on-policy value exactly")
def test_risk_neutral_reduction(record_property):
    rng = np.random.default_rng(7)
    ident = DistortionFunction("identity")
    worst = 0.0
    for _ in range(1000):
        R, _ = _random_batch(rng, 10.0)
        worst = max(worst, abs(drm_onpolicy_estimate(R, ident) - R.mean()))
        for f in DISTORTIONS:
            assert drm_offpolicy_estimate(R, np.ones(R.size), f) == drm_onpolicy_estimate(R, f)
    record_property("detail", f"max |estimate - mean| {worst:.2e}")
    assert worst <= 1e-12


def _mse_sweep(mdp, oracle, theta, f, behavior, n_batches=200, ms=(25, 100, 400)):
    exact = oracle.drm(theta, f)
    H = mdp.horizon_cap
    out = []
    for m in ms:
        u = substream(31, m, behavior is not None).random((n_batches * m, H, 2))
        if behavior is None:
            batch = simulate_batch(mdp, softmax_table(theta, mdp.num_actions), u)
            est = drm_onpolicy_estimate(batch.returns(mdp.gamma).reshape(n_batches, m), f)
        else:
            batch = simulate_batch(mdp, behavior.probs, u)
            psi = batch_importance_ratios(batch, theta, behavior, mdp.num_actions)[0].reshape(n_batches, m)
            est = drm_offpolicy_estimate(batch.returns(mdp.gamma).reshape(n_batches, m), psi, f)
        out.append(float(np.mean((est - exact) ** 2)))
    return out


@pytest.mark.criterion(3, "estimator MSE below 16 M_r^2 M_g'^2 / m (x M_s^2 off-policy), 1/m scaling on-policy")
@pytest.mark.parametrize("f", [DistortionFunction("dual_power", 2), DistortionFunction("identity"), DistortionFunction("exponential", 2.0)], ids=lambda f: f.kind)
def test_mse_bound(layered_chain, f, record_property):
    t0 = time.perf_counter()
    mdp = layered_chain
    oracle = ExactOracle(mdp)
    theta = np.random.default_rng(2024).normal(scale=0.5, size=mdp.dim)
    behavior = BehaviorPolicy.uniform(mdp)
    m_s = oracle.max_importance_ratio(theta, behavior)
    ms = (25, 100, 400)
    on = _mse_sweep(mdp, oracle, theta, f, None)
    off = _mse_sweep(mdp, oracle, theta, f, behavior)
    base = 16 * mdp.m_r**2 * f.derivative_bound**2
    elapsed = time.perf_counter() - t0
    record_property(
        "detail",
        f"on MSE {['%.2e' % x for x in on]} ratio {on[0] / on[2]:.1f}; "
        f"off MSE {['%.2e' % x for x in off]} (M_s={m_s:.3f}, ratio {off[0] / off[2]:.1f}); {elapsed:.1f}s",
    )
    for m, mse_on, mse_off in zip(ms, on, off):
        assert mse_on <= base / m
        assert mse_off <= base * m_s**2 / m
    assert on[0] / on[2] >= 8
    assert elapsed < 120


def _one_axis_evaluator(oracle, theta, axis, f):
    def evaluate(t):
        th = theta.copy()
        th[axis] += t[0]
        return oracle.drm(th, f)

    return evaluate


@pytest.mark.criterion(4, "SF gradient within 0.1 relative L2 of central differences; exact at d = 1")
@pytest.mark.parametrize("f", [DistortionFunction("dual_power", 2), DistortionFunction("identity")], ids=lambda f: f.kind)
def test_sf_gradient_fidelity(two_state, f, record_property):
    t0 = time.perf_counter()
    oracle = ExactOracle(two_state)
    theta = np.array([0.0, 0.0, 0.3, -0.2, 0.5, 0.1])
    mu = 1e-3
    est = sf_gradient_estimate(lambda th: oracle.drm(th, f), theta, SfConfig(mu, 2000, two_state.dim), substream(4, 0))
    fd = oracle.gradient(theta, f)
    rel = np.linalg.norm(est.gradient - fd) / np.linalg.norm(fd)

    # one-dimensional slice through a coordinate: the SF estimate is the central difference with step mu
    worst_1d = 0.0
    for axis in range(two_state.dim):
        evaluate = _one_axis_evaluator(oracle, theta, axis, f)
        sf1 = sf_gradient_estimate(evaluate, np.zeros(1), SfConfig(mu, 7, 1), substream(5, axis)).gradient[0]
        central = (evaluate(np.array([mu])) - evaluate(np.array([-mu]))) / (2 * mu)
        worst_1d = max(worst_1d, abs(sf1 - central))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"rel L2 {rel:.3f}, d=1 max |diff| {worst_1d:.1e}, {elapsed:.1f}s")
    assert rel <= 0.1
    assert worst_1d <= 1e-12
    assert elapsed < 60


@pytest.mark.criterion(5, "episode counters: 2mnN on-policy, mN off-policy")
@pytest.mark.parametrize("N, n, m", [(1, 1, 1), (5, 3, 4), (12, 20, 2), (3, 50, 9)])
def test_episode_budget(two_state, N, n, m, record_property):
    f = DistortionFunction("dual_power", 2)
    on = drm_onp_sf(OptConfig(N, 0.05, SfConfig(0.1, n, two_state.dim), m, f, master_seed=N), two_state)
    off_cfg = OptConfig(N, 0.05, SfConfig(0.1, n, two_state.dim), m, f, mode="off_policy", master_seed=N)
    off = drm_offp_sf(off_cfg, two_state, BehaviorPolicy.uniform(two_state))
    record_property("detail", f"N={N} n={n} m={m}: on {on.episodes_total}, off {off.episodes_total}")
    assert on.episodes_total == 2 * m * n * N
    assert off.episodes_total == m * N
    assert all(r.episodes == 2 * m * n for r in on.records)
    assert all(r.episodes == m for r in off.records)


@pytest.mark.criterion(6, "theory preset: median improvement and nonincreasing mean squared gradient norm in N")
def test_optimization_trend(bandit, two_state, record_property):
    t0 = time.perf_counter()
    cases = [("bandit", bandit, DistortionFunction("identity")), ("two_state", two_state, DistortionFunction("dual_power", 2))]
    details, failures = [], []
    for name, mdp, f in cases:
        oracle = ExactOracle(mdp)
        means = []
        for N in (25, 100, 400):
            gains, grad_means = [], []
            for seed in range(20):
                run = drm_onp_sf(OptConfig.theory(N, mdp.dim, 10, f, master_seed=seed), mdp)
                gains.append(oracle.drm(run.theta_R, f) - oracle.drm(run.iterates[0], f))
                grad_means.append(stationarity_report(run, mdp, f).mean_grad_norm_sq)
            means.append(float(np.mean(grad_means)))
            if not np.median(gains) > 0:
                failures.append(f"{name} N={N}: median gain {np.median(gains):.3g}")
        details.append(f"{name} mean|grad|^2 {['%.4f' % x for x in means]}")
        if not all(b <= a for a, b in zip(means, means[1:])):
            failures.append(f"{name}: not nonincreasing {means}")
    elapsed = time.perf_counter() - t0
    record_property("detail", "; ".join(details) + f"; {elapsed:.0f}s")
    assert not failures, failures
    assert elapsed < 15 * 60


def _snapshot(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.mark.criterion(7, "identical config and seed reproduce byte-identical outputs")
def test_determinism(tmp_path, capsys, monkeypatch, record_property):
    (tmp_path / "b.json").write_text(json.dumps({"1": [0.4, 0.6], "2": [0.5, 0.5]}))
    configs = {
        "estimate_on.json": {"mdp_path": "bundled:layered_chain", "m_values": [10, 50], "seeds": [0, 1, 2], "output_dir": "est_on",
                             "distortion": {"kind": "dual_power", "r": 2}},
        "estimate_off.json": {"mdp_path": "bundled:two_state", "mode": "off", "behavior_path": "b.json", "m_values": [20],
                              "seeds": [4, 5], "output_dir": "est_off"},
        "optimize_on.json": {"mdp_path": "bundled:two_state", "n_iterations": 15, "seeds": [0, 1, 2], "checkpoint_every": 5,
                             "output_dir": "opt_on"},
        "optimize_off.json": {"mdp_path": "bundled:two_state", "mode": "off", "behavior_path": "b.json", "n_iterations": 15,
                              "seeds": [3], "output_dir": "opt_off", "theory_preset": True},
        "oracle.json": {"mdp_path": "bundled:layered_chain", "output_dir": "orc",
                        "distortions": [{"kind": "identity"}, {"kind": "logarithmic", "r": 3}], "theta": [0.1] * 12},
    }
    commands = {"estimate_on.json": "estimate", "estimate_off.json": "estimate", "optimize_on.json": "optimize",
                "optimize_off.json": "optimize", "oracle.json": "oracle"}
    for name, cfg in configs.items():
        (tmp_path / name).write_text(json.dumps(cfg))

    def run_all(threads):
        monkeypatch.setenv("DRM_RL_THREADS", str(threads))
        stdout = []
        for name, cmd in commands.items():
            assert main([cmd, "--config", str(tmp_path / name)]) == 0
            stdout.append(capsys.readouterr().out)
        assert main(["validate", "--mdp", "bundled:layered_chain"]) == 0
        stdout.append(capsys.readouterr().out)
        outputs = {k: v for k, v in _snapshot(tmp_path).items() if "/" in k}  # skip the input files at top level
        return outputs, stdout

    first, out1 = run_all(1)
    second, out2 = run_all(1)
    third, out3 = run_all(2)
    record_property("detail", f"{len(first)} output files compared across 3 runs")
    assert len(first) > 15
    assert first == second == third
    assert out1 == out2 == out3
