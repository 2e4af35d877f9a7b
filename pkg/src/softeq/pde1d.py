"""Backward-in-time solver for the linear parabolic policy-evaluation system.

Solves  dV/dt + 0.5 sigma^2 d2V/dx2 + mu dV/dx - c V + f = 0,  V(T,.) = g
on a truncated 1-D grid, marching from the terminal time backwards:

* implicit Euler in time (one tridiagonal solve per step, Thomas algorithm);
* central second difference for diffusion;
* first-order upwind for the drift, direction chosen per the sign of mu at
  each node;
* boundary closure by linear extrapolation: the discrete second derivative
  is set to zero at the two boundary nodes and the drift falls back to the
  available one-sided difference.  The closure preserves constants and
  linear profiles exactly, at the price of a boundary strip where monotone
  bounds can be exceeded when the drift points out of the domain -- which is
  why all norms and checks exclude a boundary buffer;
* source terms are time-averaged over each step (trapezoidal), so the pure
  transport part integrates the source to second order.

The interior scheme is unconditionally monotone.  A Crank-Nicolson variant
exists behind the `scheme` flag and carries no monotonicity guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coeffexpr import evaluate
from .model import GridSpec, ProblemSpec


class SingularSystem(ArithmeticError):
    """A tridiagonal pivot fell below 1e-14; signals corrupted input fields."""


class MemoryCap(MemoryError):
    """full_tensor storage would exceed the configured memory cap."""


@dataclass(frozen=True)
class Mesh:
    """Realized time/space lattice: uniform nodes including both endpoints."""

    times: np.ndarray
    xs: np.ndarray
    buffer: int

    @classmethod
    def from_grid(cls, grid: GridSpec, horizon_T: float) -> "Mesh":
        return cls(grid.times(horizon_T), grid.xs(), grid.boundary_buffer)

    @property
    def n_t(self) -> int:
        return len(self.times)

    @property
    def n_x(self) -> int:
        return len(self.xs)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def dx(self) -> float:
        return float(self.xs[1] - self.xs[0])

    @property
    def interior(self) -> slice:
        return slice(self.buffer, self.n_x - self.buffer)


@dataclass(frozen=True)
class Field1D:
    """Scalar field on the (t, x) lattice."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.mesh.n_t, self.mesh.n_x):
            raise ValueError(
                f"field shape {self.values.shape} does not match the mesh "
                f"({self.mesh.n_t}, {self.mesh.n_x})"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @classmethod
    def constant(cls, mesh: Mesh, value: float) -> "Field1D":
        return cls(mesh, np.full((mesh.n_t, mesh.n_x), float(value)))

    @classmethod
    def from_expr(cls, mesh: Mesh, expr, extra: dict | None = None) -> "Field1D":
        tt = mesh.times[:, None]
        xx = mesh.xs[None, :]
        bindings = {"t": tt, "x": xx}
        if extra:
            bindings.update(extra)
        vals = np.asarray(evaluate(expr, bindings), dtype=float)
        return cls(mesh, np.ascontiguousarray(np.broadcast_to(vals, (mesh.n_t, mesh.n_x))))


@dataclass(frozen=True)
class SlabField:
    """The stored part of the four-index family V1(tau, t, y, x).

    diag[i, j, :]  holds the t = tau_i row of the (tau_i, y_j) solve -- the
    only part the non-local coupling needs.  next_rows[i, j, :] holds the
    t = tau_i + dt row of the same solve, kept so the solver's own discrete
    equation can be re-evaluated on the stored rows.  In full_tensor mode,
    full[i, l, j, :] holds every retained level l >= i (entries below the
    t >= tau diagonal are zero-filled and meaningless).
    """

    mesh: Mesh
    diag: np.ndarray
    next_rows: np.ndarray
    full: np.ndarray | None = None

    def __post_init__(self):
        shape = (self.mesh.n_t, self.mesh.n_x, self.mesh.n_x)
        if self.diag.shape != shape or self.next_rows.shape != shape:
            raise ValueError("slab shape does not match the mesh")
        if not (np.all(np.isfinite(self.diag)) and np.all(np.isfinite(self.next_rows))):
            raise ValueError("slab contains non-finite values")

    def diagonal_value(self) -> np.ndarray:
        """V1(t, t, x, x) on the lattice: shape (n_t, n_x)."""
        return np.ascontiguousarray(np.diagonal(self.diag, axis1=1, axis2=2))


_PIVOT_FLOOR = 1e-14


class TridiagFactor:
    """Factorized tridiagonal system, reusable across many right-hand sides."""

    def __init__(self, sub: np.ndarray, diag: np.ndarray, sup: np.ndarray):
        n = len(diag)
        cp = np.empty(n)
        den = np.empty(n)
        den[0] = diag[0]
        if abs(den[0]) < _PIVOT_FLOOR:
            raise SingularSystem("pivot below 1e-14 at row 0")
        cp[0] = sup[0] / den[0]
        for k in range(1, n):
            den[k] = diag[k] - sub[k] * cp[k - 1]
            if abs(den[k]) < _PIVOT_FLOOR:
                raise SingularSystem(f"pivot below 1e-14 at row {k}")
            cp[k] = sup[k] / den[k]
        self.sub = sub
        self.cp = cp
        self.den = den

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for one rhs of shape (n,) or a batch of shape (..., n)."""
        n = len(self.den)
        d = np.empty_like(rhs, dtype=float)
        d[..., 0] = rhs[..., 0] / self.den[0]
        for k in range(1, n):
            d[..., k] = (rhs[..., k] - self.sub[k] * d[..., k - 1]) / self.den[k]
        out = d
        for k in range(n - 2, -1, -1):
            out[..., k] = d[..., k] - self.cp[k] * out[..., k + 1]
        return out


def _operator_rows(mu: np.ndarray, sig2: np.ndarray, dx: float, reaction=None):
    """Row coefficients of L = 0.5 sig2 Dxx + mu Dx(upwind) - c.

    Returns (sub, diag, sup) such that (L v)_j = sub_j v_{j-1} + diag_j v_j
    + sup_j v_{j+1}, with the zero-curvature one-sided closure at the two
    boundary rows.
    """
    n = len(mu)
    diff = 0.5 * sig2 / dx**2
    up = np.maximum(mu, 0.0) / dx
    dn = np.maximum(-mu, 0.0) / dx
    sub = diff + dn
    sup = diff + up
    diag = -(2.0 * diff + up + dn)
    # boundary rows: no curvature, one-sided drift difference
    sub[0] = 0.0
    sup[0] = mu[0] / dx
    diag[0] = -mu[0] / dx
    sup[-1] = 0.0
    sub[-1] = -mu[-1] / dx
    diag[-1] = mu[-1] / dx
    if reaction is not None:
        diag = diag - reaction
    return sub, diag, sup


def _implicit_factor(mu, sig2, dt, dx, reaction=None, theta=1.0) -> TridiagFactor:
    sub, diag, sup = _operator_rows(mu, sig2, dx, reaction)
    return TridiagFactor(-dt * theta * sub, 1.0 - dt * theta * diag, -dt * theta * sup)


def _apply_operator(mu, sig2, dx, v, reaction=None) -> np.ndarray:
    sub, diag, sup = _operator_rows(mu, sig2, dx, reaction)
    out = diag * v
    out[..., 1:] += sub[1:] * v[..., :-1]
    out[..., :-1] += sup[:-1] * v[..., 1:]
    return out


def solve_backward(
    drift: Field1D,
    diffusion_sq: Field1D,
    source: np.ndarray | None,
    terminal: np.ndarray,
    t_start_index: int = 0,
    reaction: Field1D | None = None,
    scheme: str = "implicit_euler",
) -> Field1D:
    """March V from the terminal condition back to time node t_start_index.

    source is (n_t, n_x) or None; terminal is (n_x,).  Returns V on all time
    levels >= t_start_index (earlier rows are zero).  diffusion_sq must be
    uniformly positive for the scheme's guarantees to apply.
    """
    mesh = drift.mesh
    if scheme not in ("implicit_euler", "crank_nicolson"):
        raise ValueError(f"unknown scheme {scheme!r}")
    mu = drift.values
    sig2 = diffusion_sq.values
    react = reaction.values if reaction is not None else None
    dt, dx = mesh.dt, mesh.dx
    theta = 1.0 if scheme == "implicit_euler" else 0.5
    v = np.zeros((mesh.n_t, mesh.n_x))
    v[-1] = terminal
    for level in range(mesh.n_t - 2, t_start_index - 1, -1):
        c_row = react[level] if react is not None else None
        factor = _implicit_factor(mu[level], sig2[level], dt, dx, c_row, theta)
        rhs = v[level + 1].copy()
        if scheme == "crank_nicolson":
            c_next = react[level + 1] if react is not None else None
            rhs += 0.5 * dt * _apply_operator(mu[level + 1], sig2[level + 1], dx, v[level + 1], c_next)
        if source is not None:
            rhs += 0.5 * dt * (source[level] + source[level + 1])
        v[level] = factor.solve(rhs)
    return Field1D(mesh, v)


def _family_terminal(problem: ProblemSpec, mesh: Mesh) -> np.ndarray:
    """F(tau_i, y_j, x_k) on the aligned grids: shape (n_t, n_x, n_x)."""
    tau = mesh.times[:, None, None]
    y = mesh.xs[None, :, None]
    x = mesh.xs[None, None, :]
    vals = np.asarray(evaluate(problem.terminal_F, {"tau": tau, "y": y, "x": x}), dtype=float)
    return np.ascontiguousarray(
        np.broadcast_to(vals, (mesh.n_t, mesh.n_x, mesh.n_x))
    )


def discount_at_lags(problem: ProblemSpec, mesh: Mesh) -> np.ndarray:
    """delta evaluated exactly at the node lags m*dt, m = 0..n_t-1."""
    lags = mesh.dt * np.arange(mesh.n_t)
    return np.asarray(evaluate(problem.discount_delta, {"s": lags}), dtype=float)


def evaluate_policy_family(
    problem: ProblemSpec,
    grid: GridSpec,
    z_field: Field1D,
    h_field: Field1D,
    hz_field: Field1D,
    gamma_source_terms: np.ndarray | None,
) -> tuple[SlabField, Field1D]:
    """Policy-evaluation step: solve the frozen-coefficient linear system.

    Given the current coupling field Z and its log-partition fields H, H_z
    on the lattice, this solves

    * the scalar equation for V2: drift H_z, zero source, terminal h;
    * the family for V1, one backward solve per reference pair (tau_i, y_j):
      drift H_z, terminal F(tau_i, y_j, .), source
      delta(t - tau_i) * [H - H_z Z + gamma_source_terms[t, y_j, x]],
      integrated from T down to time node i.

    gamma_source_terms caches the reward-difference integral
    int (r(y,t,x,a) - r(x,t,x,a)) Gamma(t,x,a) da, shape (n_t, n_x, n_x)
    indexed (t, y, x); pass None when r is reference-free.

    Every family member shares the same tridiagonal matrix per time level
    (coefficients do not depend on (tau, y)), so all members are advanced
    together with one factorization per level and a batched substitution
    sweep.  The result is bit-identical to running the members one by one,
    in any order.
    """
    mesh = z_field.mesh
    dt = mesh.dt
    n_t, n_x = mesh.n_t, mesh.n_x

    sig2 = Field1D.from_expr(mesh, problem.vol_sigma).values ** 2
    delta_lags = discount_at_lags(problem, mesh)
    base = h_field.values - hz_field.values * z_field.values  # H - H_z Z per (t, x)

    full = None
    if grid.storage_mode == "full_tensor":
        entries = n_t * n_t * n_x * n_x
        if entries > grid.memory_cap_entries:
            raise MemoryCap(
                f"full_tensor needs {entries} entries, cap is {grid.memory_cap_entries}"
            )
        full = np.zeros((n_t, n_t, n_x, n_x))

    terminal = _family_terminal(problem, mesh)
    w = terminal.copy()  # w[i, j, :] = current level of member (tau_i, y_j)
    diag = np.zeros_like(w)
    next_rows = np.zeros_like(w)
    diag[n_t - 1] = terminal[n_t - 1]
    next_rows[n_t - 1] = terminal[n_t - 1]
    if full is not None:
        full[:, n_t - 1] = terminal

    def level_source(level: int, active: int) -> np.ndarray:
        lag = delta_lags[level - np.arange(active)]
        g = base[level][None, :]
        if gamma_source_terms is not None:
            g = g + gamma_source_terms[level]
        return lag[:, None, None] * g[None, :, :]

    for level in range(n_t - 2, -1, -1):
        active = level + 1
        factor = _implicit_factor(hz_field.values[level], sig2[level], dt, mesh.dx)
        src = level_source(level, active) + level_source(level + 1, active)
        next_rows[level] = w[level]
        rhs = w[:active] + 0.5 * dt * src
        w[:active] = factor.solve(rhs)
        diag[level] = w[level]
        if full is not None:
            full[:active, level] = w[:active]

    v2 = solve_backward(
        hz_field,
        Field1D(mesh, sig2),
        None,
        Field1D.from_expr(mesh, problem.terminal_h).values[0],
    )
    return SlabField(mesh, diag, next_rows, full), v2


def deriv_x(values: np.ndarray, dx: float) -> np.ndarray:
    """d/dx along the last axis: 4th-order central stencil in the interior,
    one-sided 2nd-order at the two nodes on each edge.  Exact on cubics
    inside, on quadratics at the edges."""
    v = values
    out = np.empty_like(v, dtype=float)
    out[..., 2:-2] = (-v[..., 4:] + 8 * v[..., 3:-1] - 8 * v[..., 1:-3] + v[..., :-4]) / (
        12 * dx
    )
    for k in (0, 1):
        out[..., k] = (-3 * v[..., k] + 4 * v[..., k + 1] - v[..., k + 2]) / (2 * dx)
    for k in (-2, -1):
        out[..., k] = (3 * v[..., k] - 4 * v[..., k - 1] + v[..., k - 2]) / (2 * dx)
    return out


def deriv_xx(values: np.ndarray, dx: float) -> np.ndarray:
    """d2/dx2 along the last axis: central stencil, edge rows copied from
    their neighbors (edges sit inside the excluded boundary buffer)."""
    v = values
    out = np.empty_like(v, dtype=float)
    out[..., 1:-1] = (v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]) / dx**2
    out[..., 0] = out[..., 1]
    out[..., -1] = out[..., -2]
    return out
