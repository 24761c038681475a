"""Smooth distortion functions g: [0, 1] -> [0, 1] and their derivatives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .mdp import ValidationReport

KINDS = ("identity", "dual_power", "quadratic", "exponential", "square_root", "logarithmic")

_GRID = np.linspace(0.0, 1.0, 1001)


def _param_violation(kind: str, r: float) -> str | None:
    if kind not in KINDS:
        return f"unknown distortion kind {kind!r}; expected one of {KINDS}"
    if not math.isfinite(r):
        return f"parameter r must be finite, got {r}"
    if kind == "dual_power" and r < 2:
        return f"parameter range: dual_power requires r >= 2, got {r}"
    if kind == "quadratic" and not 0 <= r <= 1:
        return f"parameter range: quadratic requires 0 <= r <= 1, got {r}"
    if kind in ("exponential", "square_root", "logarithmic") and r <= 0:
        return f"parameter range: {kind} requires r > 0, got {r}"
    return None


@dataclass(frozen=True)
class DistortionFunction:
    """A distortion kind with parameter ``r``.

    Construction rejects out-of-range parameters; use :meth:`unchecked` to build
    an instance purely for :func:`validate_distortion`.
    """

    kind: str
    r: float = 0.0
    strict: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "r", float(self.r))
        if self.strict:
            problem = _param_violation(self.kind, self.r)
            if problem:
                raise ValueError(problem)

    @classmethod
    def unchecked(cls, kind: str, r: float = 0.0) -> "DistortionFunction":
        return cls(kind, r, strict=False)

    @classmethod
    def from_config(cls, data: dict) -> "DistortionFunction":
        unknown = set(data) - {"kind", "r"}
        if unknown:
            raise ValueError(f"unknown distortion fields: {sorted(unknown)}")
        return cls(data["kind"], data.get("r", 0.0))

    def to_config(self) -> dict:
        return {"kind": self.kind, "r": self.r}

    @property
    def derivative_bound(self) -> float:
        """sup |g'| on (0, 1); every kind here attains it as s -> 0."""
        r = self.r
        if self.kind == "identity":
            return 1.0
        if self.kind == "dual_power":
            return r
        if self.kind == "quadratic":
            return 1.0 + r
        if self.kind == "exponential":
            return r / -math.expm1(-r)
        if self.kind == "square_root":
            return r / (2.0 * (math.sqrt(1.0 + r) - 1.0))
        if self.kind == "logarithmic":
            return r / math.log1p(r)
        raise ValueError(f"unknown distortion kind {self.kind!r}")

    def __call__(self, s):
        return g_eval(self, s)


def _check_unit_interval(s: np.ndarray, open_: bool = False) -> None:
    if open_:
        bad = np.any((s <= 0.0) | (s >= 1.0) | np.isnan(s))
    else:
        bad = np.any((s < 0.0) | (s > 1.0) | np.isnan(s))
    if bad:
        interval = "(0, 1)" if open_ else "[0, 1]"
        raise ValueError(f"distortion argument must lie in {interval}")


def _sqrt1p_m1(x):
    # sqrt(1 + x) - 1 without cancellation
    return x / (np.sqrt(1.0 + x) + 1.0)


def g_eval(f: DistortionFunction, s):
    s_arr = np.asarray(s, dtype=float)
    _check_unit_interval(s_arr)
    r = f.r
    if f.kind == "identity":
        out = s_arr.copy()
    elif f.kind == "dual_power":
        out = 1.0 - (1.0 - s_arr) ** r
    elif f.kind == "quadratic":
        # (1 + r) s - r s^2, arranged so g(0) and g(1) are exact
        out = s_arr + r * s_arr * (1.0 - s_arr)
    elif f.kind == "exponential":
        out = np.expm1(-r * s_arr) / math.expm1(-r)
    elif f.kind == "square_root":
        out = _sqrt1p_m1(r * s_arr) / _sqrt1p_m1(r)
    elif f.kind == "logarithmic":
        out = np.log1p(r * s_arr) / math.log1p(r)
    else:
        raise ValueError(f"unknown distortion kind {f.kind!r}")
    return float(out) if np.ndim(s) == 0 else out


def g_derivative(f: DistortionFunction, s):
    s_arr = np.asarray(s, dtype=float)
    _check_unit_interval(s_arr, open_=True)
    r = f.r
    if f.kind == "identity":
        out = np.ones_like(s_arr)
    elif f.kind == "dual_power":
        out = r * (1.0 - s_arr) ** (r - 1.0)
    elif f.kind == "quadratic":
        out = (1.0 + r) - 2.0 * r * s_arr
    elif f.kind == "exponential":
        out = r * np.exp(-r * s_arr) / -math.expm1(-r)
    elif f.kind == "square_root":
        out = r / (2.0 * np.sqrt(1.0 + r * s_arr) * _sqrt1p_m1(r))
    elif f.kind == "logarithmic":
        out = r / ((1.0 + r * s_arr) * math.log1p(r))
    else:
        raise ValueError(f"unknown distortion kind {f.kind!r}")
    return float(out) if np.ndim(s) == 0 else out


def validate_distortion(f: DistortionFunction) -> ValidationReport:
    report = ValidationReport()
    problem = _param_violation(f.kind, f.r)
    if problem:
        report.violations.append(problem)
        if f.kind not in KINDS or not math.isfinite(f.r):
            return report
    with np.errstate(all="ignore"):
        try:
            g = g_eval(f, _GRID)
            dg = g_derivative(f, _GRID[1:-1])
            bound = f.derivative_bound
        except (ValueError, ZeroDivisionError) as exc:
            report.violations.append(f"evaluation failed: {exc}")
            return report
    if not np.all(np.isfinite(g)):
        report.violations.append("g is not finite on [0, 1]")
        return report
    if abs(g[0]) > 1e-12:
        report.violations.append(f"g(0) = {g[0]!r}, expected 0")
    if abs(g[-1] - 1.0) > 1e-12:
        report.violations.append(f"g(1) = {g[-1]!r}, expected 1")
    if np.any(np.diff(g) < -1e-12):
        report.violations.append("g is not nondecreasing on the 1e-3 grid")
    if not np.all(np.isfinite(dg)) or np.max(np.abs(dg)) > bound * (1 + 1e-12):
        report.violations.append(f"derivative_bound {bound!r} below max grid |g'| {np.max(np.abs(dg))!r}")
    return report
