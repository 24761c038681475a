"""Command-line front end: ``drm-rl {estimate,optimize,oracle,validate}``.

All outputs embed the resolved config and master seed. Floats in CSV files
are written with 17 significant digits; reruns with the same config produce
identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .distortion import DistortionFunction, validate_distortion
from .estimation import drm_offpolicy_estimate, drm_onpolicy_estimate
from .mdp import MdpFormatError, MdpSpec, bundled_mdp_path, load_mdp, sample_batch, validate_mdp
from .optimizer import OptConfig, OptRun, run_optimizer, stationarity_report, substream
from .oracle import ExactOracle, OracleRefusal
from .policy import BehaviorPolicy, batch_importance_ratios, load_behavior, softmax_table
from .sf_gradient import SfConfig

THREADS_ENV = "DRM_RL_THREADS"


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None, file: str | None = None):
        self.field, self.file = field, file
        super().__init__(message)

    def to_dict(self) -> dict:
        return {"error": "ConfigError", "message": str(self), "field": self.field, "file": self.file}


@dataclass
class ExperimentConfig:
    mdp_path: str
    distortion: dict = field(default_factory=lambda: {"kind": "identity", "r": 0.0})
    distortions: list = field(default_factory=list)
    mode: str = "on_policy"
    behavior_path: str | None = None
    theta: list | None = None
    n_iterations: int = 100
    step_size: float = 0.1
    mu: float = 0.1
    n_directions: int = 10
    episodes_per_eval: int = 10
    theory_preset: bool = False
    seeds: list = field(default_factory=lambda: [0])
    m_values: list = field(default_factory=lambda: [25, 100, 400])
    checkpoint_every: int = 0
    fd_step: float = 1e-5
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_MODES = {"on": "on_policy", "off": "off_policy", "on_policy": "on_policy", "off_policy": "off_policy"}


def _resolve_path(value: str, base: Path) -> str:
    if value.startswith("bundled:"):
        return str(bundled_mdp_path(value.split(":", 1)[1]))
    p = Path(value)
    return str(p if p.is_absolute() else (base / p))


def load_config(path: str | None, overrides: argparse.Namespace) -> ExperimentConfig:
    data: dict = {}
    base = Path.cwd()
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError("config file not found", field="--config", file=path) from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", file=path) from None
        base = Path(path).resolve().parent
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config fields {unknown}", field=unknown[0], file=path)
    if getattr(overrides, "mdp", None):
        data["mdp_path"] = overrides.mdp
        if path is None:
            base = Path.cwd()
    if "mdp_path" not in data:
        raise ConfigError("mdp_path is required", field="mdp_path", file=path)
    if getattr(overrides, "mode", None):
        data["mode"] = overrides.mode
    if getattr(overrides, "preset_theory", False):
        data["theory_preset"] = True
    if getattr(overrides, "out", None):
        data["output_dir"] = overrides.out
    cfg = ExperimentConfig(**data)

    if cfg.mode not in _MODES:
        raise ConfigError(f"mode must be on or off, got {cfg.mode!r}", field="mode", file=path)
    cfg.mode = _MODES[cfg.mode]
    offset = getattr(overrides, "seed_offset", 0) or 0
    if not cfg.seeds or not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
        raise ConfigError("seeds must be a nonempty list of nonnegative integers", field="seeds", file=path)
    cfg.seeds = [s + offset for s in cfg.seeds]
    cfg.mdp_path = _resolve_path(cfg.mdp_path, base)
    if not Path(cfg.mdp_path).is_file():
        raise ConfigError(f"MDP file {cfg.mdp_path} does not exist", field="mdp_path", file=path)
    if cfg.behavior_path is not None:
        cfg.behavior_path = _resolve_path(cfg.behavior_path, base)
        if not Path(cfg.behavior_path).is_file():
            raise ConfigError(f"behavior file {cfg.behavior_path} does not exist", field="behavior_path", file=path)
    elif cfg.mode == "off_policy":
        raise ConfigError("off-policy mode needs behavior_path", field="behavior_path", file=path)
    for name in ("distortion",):
        try:
            DistortionFunction.from_config(getattr(cfg, name))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid distortion: {exc}", field=name, file=path) from None
    out = Path(cfg.output_dir)
    if not out.is_absolute() and path is not None and not getattr(overrides, "out", None):
        out = base / out
    cfg.output_dir = str(out)
    return cfg


def _load_mdp(cfg: ExperimentConfig) -> MdpSpec:
    try:
        mdp = load_mdp(cfg.mdp_path)
    except (MdpFormatError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid MDP spec: {exc}", field="mdp_path", file=cfg.mdp_path) from None
    report = validate_mdp(mdp)
    if not report:
        raise ConfigError("invalid MDP: " + "; ".join(report.violations), field="mdp_path", file=cfg.mdp_path)
    return mdp


def _load_behavior(cfg: ExperimentConfig, mdp: MdpSpec) -> BehaviorPolicy | None:
    if cfg.behavior_path is None:
        return None
    try:
        return load_behavior(cfg.behavior_path, mdp)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid behavior policy: {exc}", field="behavior_path", file=cfg.behavior_path) from None


def _theta(cfg: ExperimentConfig, mdp: MdpSpec) -> np.ndarray:
    if cfg.theta is None:
        return np.zeros(mdp.dim)
    theta = np.asarray(cfg.theta, dtype=float)
    if theta.shape != (mdp.dim,):
        raise ConfigError(f"theta must have {mdp.dim} entries, got {theta.size}", field="theta")
    return theta


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_csv(path: Path, header: list[str], rows: list[list], meta: dict) -> None:
    buf = io.StringIO()
    for key, value in meta.items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> None:
    path.write_text(_dump_json(obj))


def _oracle_or_none(mdp: MdpSpec) -> ExactOracle | None:
    try:
        return ExactOracle(mdp)
    except OracleRefusal:
        return None


def cmd_estimate(cfg: ExperimentConfig) -> dict:
    mdp = _load_mdp(cfg)
    f = DistortionFunction.from_config(cfg.distortion)
    behavior = _load_behavior(cfg, mdp)
    theta = _theta(cfg, mdp)
    off = cfg.mode == "off_policy"
    oracle = _oracle_or_none(mdp)
    exact = None
    m_s = 1.0
    if oracle is not None:
        try:
            exact = oracle.drm(theta, f)
            if off:
                m_s = oracle.max_importance_ratio(theta, behavior)
        except OracleRefusal:
            exact = None
    target = softmax_table(theta, mdp.num_actions)

    rows = []
    summary_m = []
    for m in cfg.m_values:
        bound = 16.0 * mdp.m_r**2 * f.derivative_bound**2 * (m_s**2 if off else 1.0) / m
        ests, truncs = [], []
        for seed in cfg.seeds:
            rng = substream(seed, int(m))
            if off:
                batch = sample_batch(mdp, behavior.probs, m, rng)
                psi = batch_importance_ratios(batch, theta, behavior, mdp.num_actions)[0]
                est = drm_offpolicy_estimate(batch.returns(mdp.gamma), psi, f)
            else:
                batch = sample_batch(mdp, target, m, rng)
                est = drm_onpolicy_estimate(batch.returns(mdp.gamma), f)
            sq = None if exact is None else (est - exact) ** 2
            rows.append([m, seed, est, exact, sq, bound, batch.truncated_fraction])
            ests.append(est)
            truncs.append(batch.truncated_fraction)
        ests = np.array(ests)
        summary_m.append({
            "m": m,
            "mean_estimate": float(ests.mean()),
            "std_estimate": float(ests.std(ddof=1)) if ests.size > 1 else 0.0,
            "mse": None if exact is None else float(np.mean((ests - exact) ** 2)),
            "bound": bound,
            "truncated_frac": float(np.mean(truncs)),
            "n_batches": int(ests.size),
        })
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.to_dict(), "master_seeds": cfg.seeds}
    _write_csv(out / "estimate.csv", ["m", "seed", "estimate", "exact", "sq_error", "bound", "truncated_frac"], rows, meta)
    summary = {
        **meta,
        "exact_drm": exact,
        "oracle_exact": exact is not None,
        "m_r": mdp.m_r,
        "derivative_bound": f.derivative_bound,
        "m_s": m_s if off else None,
        "per_m": summary_m,
    }
    _write_json(out / "estimate_summary.json", summary)
    return summary


def _opt_config(cfg: ExperimentConfig, mdp: MdpSpec, seed: int) -> OptConfig:
    f = DistortionFunction.from_config(cfg.distortion)
    try:
        return OptConfig(
            n_iterations=cfg.n_iterations,
            step_size=cfg.step_size,
            sf=SfConfig(mu=cfg.mu, n=cfg.n_directions, d=mdp.dim),
            episodes_per_eval=cfg.episodes_per_eval,
            distortion=f,
            mode=cfg.mode,
            theory_preset=cfg.theory_preset,
            master_seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _optimize_seed(cfg: ExperimentConfig, seed: int) -> dict:
    mdp = _load_mdp(cfg)
    behavior = _load_behavior(cfg, mdp)
    theta0 = _theta(cfg, mdp)
    ocfg = _opt_config(cfg, mdp, seed)
    run = run_optimizer(ocfg, mdp, theta0, behavior)
    out = Path(cfg.output_dir)
    meta = {"config": cfg.to_dict(), "opt_config": ocfg.to_dict(), "master_seed": seed}
    rows = [[r.iteration, r.grad_est_norm, r.mean_drm_plus, r.mean_drm_minus, r.episodes_cum, r.truncated_frac]
            for r in run.records]
    _write_csv(out / f"trace_seed{seed}.csv",
               ["iter", "grad_est_norm", "mean_drm_plus", "mean_drm_minus", "episodes_cum", "truncated_frac"],
               rows, meta)
    if cfg.checkpoint_every > 0:
        for k in range(0, len(run.iterates), cfg.checkpoint_every):
            _write_json(out / f"theta_seed{seed}_iter{k}.json", {**meta, "iter": k, "theta": run.iterates[k].tolist()})
    summary = _run_summary(run, mdp, ocfg, meta)
    if run.R_index is not None:
        _write_json(out / f"theta_R_seed{seed}.json", {**meta, "R_index": run.R_index, "theta": run.theta_R.tolist()})
    _write_json(out / f"summary_seed{seed}.json", summary)
    return summary


def _run_summary(run: OptRun, mdp: MdpSpec, ocfg: OptConfig, meta: dict) -> dict:
    f = ocfg.distortion
    summary = {
        **meta,
        "R_index": run.R_index,
        "episodes_total": run.episodes_total,
        "truncated_frac": float(np.mean([r.truncated_frac for r in run.records])) if run.records else 0.0,
        "oracle_exact": False,
    }
    oracle = _oracle_or_none(mdp)
    if oracle is None:
        return summary
    try:
        summary["exact_drm_theta0"] = oracle.drm(run.iterates[0], f)
        if run.R_index is not None:
            summary["exact_drm_theta_R"] = oracle.drm(run.theta_R, f)
            report = stationarity_report(run, mdp, f)
            summary["stationarity"] = report.to_dict()
        summary["oracle_exact"] = True
    except OracleRefusal:
        pass
    return summary


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def cmd_optimize(cfg: ExperimentConfig) -> dict:
    mdp = _load_mdp(cfg)
    behavior = _load_behavior(cfg, mdp)
    if cfg.mode == "off_policy":
        try:
            behavior.check_full_support()
        except ValueError as exc:
            raise ConfigError(str(exc), field="behavior_path", file=cfg.behavior_path) from None
    _opt_config(cfg, mdp, cfg.seeds[0])
    _theta(cfg, mdp)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    workers = min(_threads(), len(cfg.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_optimize_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        results = [_optimize_seed(cfg, s) for s in cfg.seeds]
    summary = {"config": cfg.to_dict(), "master_seeds": cfg.seeds, "runs": results}
    _write_json(Path(cfg.output_dir) / "optimize_summary.json", summary)
    return summary


def cmd_oracle(cfg: ExperimentConfig) -> dict:
    mdp = _load_mdp(cfg)
    behavior = _load_behavior(cfg, mdp)
    theta = _theta(cfg, mdp)
    oracle = ExactOracle(mdp)
    dist = oracle.distribution(theta)
    specs = cfg.distortions or [cfg.distortion]
    result = {
        "config": cfg.to_dict(),
        "master_seeds": cfg.seeds,
        "theta": theta.tolist(),
        "atoms": [[v, p] for v, p in dist.atoms],
        "residual_mass": dist.residual_mass,
        "m_r": mdp.m_r,
        "exact_drm": [],
    }
    for spec in specs:
        f = DistortionFunction.from_config(spec)
        result["exact_drm"].append({
            "distortion": f.to_config(),
            "value": oracle.drm(theta, f),
            "gradient": oracle.gradient(theta, f, cfg.fd_step).tolist(),
        })
    result["m_s"] = None if behavior is None else oracle.max_importance_ratio(theta, behavior)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "oracle.json", result)
    return result


def cmd_validate(cfg: ExperimentConfig) -> dict:
    try:
        mdp = load_mdp(cfg.mdp_path)
    except (MdpFormatError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid MDP spec: {exc}", field="mdp_path", file=cfg.mdp_path) from None
    d = cfg.distortion
    report = {
        "config": cfg.to_dict(),
        "master_seeds": cfg.seeds,
        "mdp": validate_mdp(mdp).violations,
        "distortion": validate_distortion(DistortionFunction.unchecked(d["kind"], d.get("r", 0.0))).violations,
    }
    if cfg.behavior_path is not None:
        try:
            load_behavior(cfg.behavior_path, mdp).check_full_support()
            report["behavior"] = []
        except ValueError as exc:
            report["behavior"] = [str(exc)]
    report["ok"] = not any(report[k] for k in ("mdp", "distortion", "behavior") if k in report)
    return report


COMMANDS = {"estimate": cmd_estimate, "optimize": cmd_optimize, "oracle": cmd_oracle, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drm-rl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--mdp", help="MDP spec path (or bundled:NAME); overrides mdp_path")
        p.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--mode", choices=["on", "off"])
        p.add_argument("--preset-theory", action="store_true", help="alpha=1/sqrt(N), mu=N^-1/4, n=N")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args)
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
        return 2
    except (OracleRefusal, ValueError, FloatingPointError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    if args.command in ("oracle", "validate"):
        sys.stdout.write(_dump_json(result))
    if args.command == "validate" and not result["ok"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
