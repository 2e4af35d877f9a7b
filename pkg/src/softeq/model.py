"""Control-problem definition, discretization parameters, and probe validation.

A ProblemSpec bundles the coefficient expressions of the control problem:
drift b(t,x,a), volatility sigma(t,x), running reward r(y,t,x,a), discount
delta(s), terminal rewards F(tau,y,x) and h(x), the nonlinearity G(t,x,z)
with its analytic z-derivative, temperature, horizon, and the action
interval.  Global smoothness/boundedness assumptions cannot be verified
numerically, so validate() probes a deterministic lattice instead: hard
failure for sign/monotonicity violations, warnings for unbounded-looking
coefficients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .coeffexpr import Expr, evaluate, parse, variables


class ValidationError(ValueError):
    """A checkable model assumption failed on the probe lattice."""


class UnknownProblem(KeyError):
    """Requested builtin problem name is not in the registry."""


_FIELD_VARS = {
    "drift_b": {"t", "x", "a"},
    "vol_sigma": {"t", "x"},
    "reward_r": {"y", "t", "x", "a"},
    "discount_delta": {"s"},
    "terminal_F": {"tau", "y", "x"},
    "terminal_h": {"x"},
    "nonlinear_G": {"t", "x", "z"},
    "nonlinear_G_z": {"t", "x", "z"},
}


@dataclass(frozen=True)
class ProblemSpec:
    """The control problem.  Immutable after construction."""

    drift_b: Expr
    vol_sigma: Expr
    reward_r: Expr
    discount_delta: Expr
    terminal_F: Expr
    terminal_h: Expr
    nonlinear_G: Expr
    nonlinear_G_z: Expr
    temperature_lambda: float
    horizon_T: float
    action_interval: tuple[float, float]

    def __post_init__(self):
        if not self.temperature_lambda > 0:
            raise ValidationError("temperature lambda must be positive")
        if not self.horizon_T > 0:
            raise ValidationError("horizon T must be positive")
        a_lo, a_hi = self.action_interval
        if not a_lo < a_hi:
            raise ValidationError("action interval must satisfy a_lo < a_hi")
        for name, allowed in _FIELD_VARS.items():
            used = variables(getattr(self, name))
            extra = used - allowed
            if extra:
                raise ValidationError(
                    f"{name} may only use variables {sorted(allowed)}, found {sorted(extra)}"
                )

    @classmethod
    def from_strings(
        cls,
        sources: Mapping[str, str],
        temperature_lambda: float,
        horizon_T: float,
        action_interval: tuple[float, float],
    ) -> "ProblemSpec":
        """Build a spec from expression source strings keyed by field name."""
        missing = set(_FIELD_VARS) - set(sources)
        if missing:
            raise ValidationError(f"missing coefficient expressions: {sorted(missing)}")
        exprs = {name: parse(sources[name]) for name in _FIELD_VARS}
        return cls(
            temperature_lambda=float(temperature_lambda),
            horizon_T=float(horizon_T),
            action_interval=(float(action_interval[0]), float(action_interval[1])),
            **exprs,
        )

    @property
    def action_volume(self) -> float:
        return self.action_interval[1] - self.action_interval[0]

    def reward_is_reference_free(self) -> bool:
        """True when r does not depend on the reference state y."""
        return "y" not in variables(self.reward_r)


STORAGE_MODES = ("diagonal_slab", "full_tensor")


@dataclass(frozen=True)
class GridSpec:
    """Discretization of (tau, t, y, x, a).

    The tau-grid equals the t-grid and the y-grid equals the x-grid by
    construction: the non-local coupling needs the exact diagonal values
    V1_x(t,t,x,x), and aligned grids avoid interpolating it.
    """

    x_min: float
    x_max: float
    n_x: int
    n_t: int
    n_a: int
    boundary_buffer: int = 2
    storage_mode: str = "diagonal_slab"
    memory_cap_entries: int = 40_000_000

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValidationError("grid requires x_min < x_max")
        if self.n_x < 5:
            raise ValidationError("grid requires n_x >= 5")
        if self.n_t < 3:
            raise ValidationError("grid requires n_t >= 3")
        if self.n_a < 4:
            raise ValidationError("grid requires n_a >= 4")
        if not (1 <= self.boundary_buffer < self.n_x / 4):
            raise ValidationError("boundary_buffer must satisfy 1 <= buffer < n_x/4")
        if self.storage_mode not in STORAGE_MODES:
            raise ValidationError(f"storage_mode must be one of {STORAGE_MODES}")
        if self.storage_mode == "full_tensor":
            entries = self.n_t * self.n_t * self.n_x * self.n_x
            if entries > self.memory_cap_entries:
                raise ValidationError(
                    f"full_tensor mode needs {entries} entries, cap is {self.memory_cap_entries}"
                )

    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    def times(self, horizon_T: float) -> np.ndarray:
        return np.linspace(0.0, horizon_T, self.n_t)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    def dt(self, horizon_T: float) -> float:
        return horizon_T / (self.n_t - 1)

    @property
    def interior(self) -> slice:
        """Spatial slice with the boundary buffer stripped."""
        return slice(self.boundary_buffer, self.n_x - self.boundary_buffer)


@dataclass
class ValidationCheck:
    name: str
    passed: bool
    warning: bool
    detail: str
    value: float | None = None


@dataclass
class ValidationReport:
    checks: list[ValidationCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def warnings(self) -> list[ValidationCheck]:
        return [c for c in self.checks if c.warning]

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [
                {
                    "name": c.name,
                    "passed": c.passed,
                    "warning": c.warning,
                    "detail": c.detail,
                    "value": c.value,
                }
                for c in self.checks
            ],
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.as_dict(), indent=indent, sort_keys=True)


_BOUNDEDNESS_THRESHOLD = 1e6


def _probe_axis(values: np.ndarray, max_points: int) -> np.ndarray:
    if len(values) <= max_points:
        return values
    idx = np.unique(np.linspace(0, len(values) - 1, max_points).round().astype(int))
    return values[idx]


def validate(spec: ProblemSpec, grid: GridSpec) -> ValidationReport:
    """Probe the checkable model assumptions on a deterministic lattice.

    Hard failures (raised as ValidationError, naming the check and the
    offending probe point): delta(0) != 1, delta increasing, sigma not
    uniformly positive, G_z inconsistent with a centered difference of G.
    Unbounded-looking drift/reward probes only warn.
    """
    report = ValidationReport()
    T = spec.horizon_T
    s_probe = np.linspace(0.0, T, 65)
    t_probe = _probe_axis(grid.times(T), 17)
    x_probe = _probe_axis(grid.xs(), 33)
    a_lo, a_hi = spec.action_interval
    a_probe = np.linspace(a_lo, a_hi, min(grid.n_a, 17))
    z_probe = np.linspace(-5.0, 5.0, 21)

    delta0 = evaluate(spec.discount_delta, {"s": 0.0})
    ok = abs(delta0 - 1.0) <= 1e-9
    report.checks.append(
        ValidationCheck("delta_initial", ok, False, f"delta(0) = {delta0!r}", delta0)
    )
    if not ok:
        raise ValidationError(f"delta(0) must equal 1, got {delta0!r}")

    delta_vals = np.asarray([evaluate(spec.discount_delta, {"s": float(s)}) for s in s_probe])
    increases = np.nonzero(np.diff(delta_vals) > 1e-12)[0]
    ok = increases.size == 0
    detail = "delta non-increasing on probe grid"
    if not ok:
        k = int(increases[0])
        detail = (
            f"delta not non-increasing: delta({s_probe[k]:.6g}) = {delta_vals[k]:.9g} "
            f"< delta({s_probe[k + 1]:.6g}) = {delta_vals[k + 1]:.9g}"
        )
    report.checks.append(ValidationCheck("delta_monotone", ok, False, detail))
    if not ok:
        raise ValidationError(detail)

    tt, xx = np.meshgrid(t_probe, x_probe, indexing="ij")
    sigma_vals = np.asarray(evaluate(spec.vol_sigma, {"t": tt, "x": xx}), dtype=float)
    sigma_vals = np.broadcast_to(sigma_vals, tt.shape)
    sigma_min = float(np.min(sigma_vals))
    ok = sigma_min > 1e-8
    k = np.unravel_index(int(np.argmin(sigma_vals)), sigma_vals.shape)
    detail = f"empirical sigma_min = {sigma_min:.9g} at (t={tt[k]:.6g}, x={xx[k]:.6g})"
    report.checks.append(ValidationCheck("sigma_lower_bound", ok, False, detail, sigma_min))
    if not ok:
        raise ValidationError(f"sigma must be uniformly positive: {detail}")

    step = 1e-4
    worst_gap = 0.0
    worst_point = None
    for zv in z_probe:
        bind = {"t": tt, "x": xx, "z": zv}
        gz = np.broadcast_to(
            np.asarray(evaluate(spec.nonlinear_G_z, bind), dtype=float), tt.shape
        )
        g_hi = np.asarray(evaluate(spec.nonlinear_G, {"t": tt, "x": xx, "z": zv + step}))
        g_lo = np.asarray(evaluate(spec.nonlinear_G, {"t": tt, "x": xx, "z": zv - step}))
        fd = np.broadcast_to((g_hi - g_lo) / (2 * step), tt.shape)
        gap = np.abs(fd - gz) / np.maximum(1.0, np.abs(fd))
        k = np.unravel_index(int(np.argmax(gap)), gap.shape)
        if gap[k] > worst_gap:
            worst_gap = float(gap[k])
            worst_point = (float(tt[k]), float(xx[k]), float(zv))
    ok = worst_gap <= 1e-6
    detail = f"max relative gap {worst_gap:.6g}"
    if worst_point is not None:
        detail += f" at (t={worst_point[0]:.6g}, x={worst_point[1]:.6g}, z={worst_point[2]:.6g})"
    report.checks.append(ValidationCheck("G_z_consistency", ok, False, detail, worst_gap))
    if not ok:
        raise ValidationError(f"G_z inconsistent with centered difference of G: {detail}")

    tt4 = tt[:, :, None]
    xx4 = xx[:, :, None]
    aa4 = a_probe[None, None, :]
    b_vals = np.broadcast_to(
        np.asarray(evaluate(spec.drift_b, {"t": tt4, "x": xx4, "a": aa4}), dtype=float),
        (len(t_probe), len(x_probe), len(a_probe)),
    )
    r_vals = np.broadcast_to(
        np.asarray(
            evaluate(spec.reward_r, {"y": xx4, "t": tt4, "x": xx4, "a": aa4}), dtype=float
        ),
        (len(t_probe), len(x_probe), len(a_probe)),
    )
    for name, vals in (("drift_bounded", b_vals), ("reward_bounded", r_vals)):
        sup = float(np.max(np.abs(vals)))
        bounded = np.isfinite(sup) and sup <= _BOUNDEDNESS_THRESHOLD
        detail = f"empirical sup = {sup:.6g}"
        if not bounded:
            detail += " (looks unbounded; model assumptions want bounded coefficients)"
        report.checks.append(ValidationCheck(name, True, not bounded, detail, sup))

    return report


def _consumption(utility: str, params: dict) -> ProblemSpec:
    p = {
        "rho": 0.1,
        "alpha": 1.0,
        "sigma": 1.0,
        "c0": 1.0,
        "a_lo": 0.1,
        "a_hi": 0.9,
        "lambda": 1.0,
        "T": 1.0,
    }
    p.update(params)
    wealth = "a * exp(x)"
    if utility == "exp":
        r = f"-exp(-{p['alpha']!r} * ({wealth}))"
    elif utility == "sigmoid":
        r = f"1 / (1 + exp(-{p['alpha']!r} * ({wealth})))"
    else:
        r = f"arctan({p['alpha']!r} * ({wealth}))"
    return ProblemSpec.from_strings(
        {
            "drift_b": f"{p['c0']!r} - a",
            "vol_sigma": f"{p['sigma']!r}",
            "reward_r": r,
            "discount_delta": f"1 / (1 + {p['rho']!r} * s)",
            "terminal_F": "0",
            "terminal_h": "0",
            "nonlinear_G": "0",
            "nonlinear_G_z": "0",
        },
        temperature_lambda=p["lambda"],
        horizon_T=p["T"],
        action_interval=(p["a_lo"], p["a_hi"]),
    )


def _lq_bounded(params: dict) -> ProblemSpec:
    p = {
        "rho": 0.1,
        "sigma": 1.0,
        "c0": 0.5,
        "q": 0.1,
        "a_lo": -1.0,
        "a_hi": 1.0,
        "lambda": 1.0,
        "T": 1.0,
    }
    p.update(params)
    return ProblemSpec.from_strings(
        {
            "drift_b": f"{p['c0']!r} - a",
            "vol_sigma": f"{p['sigma']!r}",
            "reward_r": f"-tanh(x^2) - {p['q']!r} * a^2",
            "discount_delta": f"1 / (1 + {p['rho']!r} * s)",
            "terminal_F": "0",
            "terminal_h": "0",
            "nonlinear_G": "0",
            "nonlinear_G_z": "0",
        },
        temperature_lambda=p["lambda"],
        horizon_T=p["T"],
        action_interval=(p["a_lo"], p["a_hi"]),
    )


def _tc_reduction(params: dict) -> ProblemSpec:
    p = {
        "rho": 0.3,
        "alpha": 1.0,
        "sigma": 1.0,
        "c0": 1.0,
        "a_lo": 0.1,
        "a_hi": 0.9,
        "lambda": 1.0,
        "T": 1.0,
    }
    p.update(params)
    # exponential discount, reference-free reward, G == 0: the configuration
    # where the problem degenerates to standard time-consistent control
    return ProblemSpec.from_strings(
        {
            "drift_b": f"{p['c0']!r} - a",
            "vol_sigma": f"{p['sigma']!r}",
            "reward_r": f"-exp(-{p['alpha']!r} * (a * exp(x)))",
            "discount_delta": f"exp(-{p['rho']!r} * s)",
            "terminal_F": "0",
            "terminal_h": "0",
            "nonlinear_G": "0",
            "nonlinear_G_z": "0",
        },
        temperature_lambda=p["lambda"],
        horizon_T=p["T"],
        action_interval=(p["a_lo"], p["a_hi"]),
    )


_REGISTRY = {
    "consumption_exp": lambda params: _consumption("exp", params),
    "consumption_sigmoid": lambda params: _consumption("sigmoid", params),
    "consumption_arctan": lambda params: _consumption("arctan", params),
    "lq_bounded": _lq_bounded,
    "tc_reduction": _tc_reduction,
}

_KNOWN_PARAMS = {"rho", "alpha", "sigma", "c0", "q", "a_lo", "a_hi", "lambda", "T"}


def builtin_problem(name: str, params: Mapping[str, float] | None = None) -> ProblemSpec:
    """Instantiate a shipped benchmark problem, defaults overridable by params."""
    if name not in _REGISTRY:
        raise UnknownProblem(name)
    params = dict(params or {})
    unknown = set(params) - _KNOWN_PARAMS
    if unknown:
        raise ValidationError(f"unknown parameters for {name!r}: {sorted(unknown)}")
    return _REGISTRY[name]({k: float(v) for k, v in params.items()})
