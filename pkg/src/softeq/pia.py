"""The two-step policy iteration driver.

Each sweep alternates

1. policy update: from the coupling field Z form the Gibbs tables (H, H_z,
   Gamma) on the (t, x) lattice -- the updated policy is the Gibbs density
   and never needs to be materialized beyond those tables;
2. policy evaluation: solve the frozen-coefficient linear system for the
   next iterates (V1 family, V2), then extract the new Z from the diagonal
   slab gradient.

Iteration stops when the discrete C2-type increment norm

    [dV1]^(2) + ||dV2||^(2)
    (sup of values, first divided differences in t,
     first and second divided differences in x, interior lattice only)

falls below the tolerance.  Increment histories feed a geometric-rate fit.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import gibbs as gibbs_mod
from .coeffexpr import evaluate, parse
from .gibbs import ActionQuadrature, GibbsTables, build_quadrature, gibbs_tables
from .model import GridSpec, ProblemSpec
from .pde1d import (
    Field1D,
    Mesh,
    SlabField,
    deriv_x,
    evaluate_policy_family,
)


class NotConverged(RuntimeError):
    """Raised by run() at max_iters (then carries the iteration report) and
    by verifiers handed a state without a satisfied convergence certificate."""

    def __init__(self, report: "IterationReport | None" = None, message: str | None = None):
        if message is None:
            if report is not None and report.records:
                message = (
                    f"not converged after {len(report.records)} iterations "
                    f"(last increment {report.records[-1].c2:.3e})"
                )
            else:
                message = "not converged: no iterations performed"
        super().__init__(message)
        self.report = report


class OutOfDomain(ValueError):
    """Query point off the lattice or outside the action interval."""


@dataclass(frozen=True)
class Norms:
    """Discrete parabolic norm snapshot on the interior lattice."""

    sup: float
    dt_sup: float
    grad_sup: float
    hess_sup: float

    @property
    def c0(self) -> float:
        return self.sup

    @property
    def c2(self) -> float:
        return self.sup + self.dt_sup + self.grad_sup + self.hess_sup

    def as_dict(self) -> dict:
        return {
            "sup": self.sup,
            "dt_sup": self.dt_sup,
            "grad_sup": self.grad_sup,
            "hess_sup": self.hess_sup,
            "c2": self.c2,
        }


def _lattice_norms(values: np.ndarray, mesh: Mesh) -> Norms:
    """Shared kernel: values has time on axis 0 and flow-x on the last axis.

    Any axes in between (the reference-y axis of a slab) are restricted to
    the interior as well and then swept by the sup.
    """
    v = values
    buf, n_x = mesh.buffer, mesh.n_x
    t_diff = np.diff(v, axis=0) / mesh.dt
    grad = (v[..., 2:] - v[..., :-2]) / (2 * mesh.dx)
    hess = (v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]) / mesh.dx**2

    def interior_sup(arr: np.ndarray, last: slice) -> float:
        idx = [slice(None)] * arr.ndim
        for ax in range(1, arr.ndim - 1):
            idx[ax] = slice(buf, arr.shape[ax] - buf)
        idx[-1] = last
        sub = arr[tuple(idx)]
        return float(np.max(np.abs(sub))) if sub.size else 0.0

    inner = slice(buf, n_x - buf)
    # centered-difference arrays lose one node per side
    inner_short = slice(buf - 1, n_x - 1 - buf)
    return Norms(
        sup=interior_sup(v, inner),
        dt_sup=interior_sup(t_diff, inner),
        grad_sup=interior_sup(grad, inner_short),
        hess_sup=interior_sup(hess, inner_short),
    )


def discrete_norms(field_values: Union[Field1D, SlabField]) -> Norms:
    """Discrete sup and C2-type norms of a lattice field or a slab.

    For a slab, the time difference runs across the stored diagonal rows and
    spatial differences act on the flow-x index; the reference-y axis is
    restricted to the interior and swept by the sup, with no y-derivative
    terms (matching the family norm, which takes a sup over references).
    """
    if isinstance(field_values, SlabField):
        return _lattice_norms(field_values.diag, field_values.mesh)
    return _lattice_norms(field_values.values, field_values.mesh)


class Workspace:
    """Iteration-independent caches for one (problem, grid) pair."""

    def __init__(self, problem: ProblemSpec, grid: GridSpec):
        self.problem = problem
        self.grid = grid
        self.mesh = Mesh.from_grid(grid, problem.horizon_T)
        a_lo, a_hi = problem.action_interval
        self.quadrature: ActionQuadrature = build_quadrature(a_lo, a_hi, grid.n_a)
        tt = self.mesh.times[:, None, None]
        xx = self.mesh.xs[None, :, None]
        aa = self.quadrature.nodes[None, None, :]
        shape = (self.mesh.n_t, self.mesh.n_x, len(self.quadrature.nodes))
        self.b_nodes = np.ascontiguousarray(
            np.broadcast_to(
                np.asarray(evaluate(problem.drift_b, {"t": tt, "x": xx, "a": aa}), float),
                shape,
            )
        )
        self.r_nodes = np.ascontiguousarray(
            np.broadcast_to(
                np.asarray(
                    evaluate(problem.reward_r, {"y": xx, "t": tt, "x": xx, "a": aa}), float
                ),
                shape,
            )
        )
        self._r_reference_diff: np.ndarray | None = None

    def tables(self, z_values: np.ndarray) -> GibbsTables:
        return gibbs_tables(
            self.quadrature.weights,
            self.b_nodes,
            self.r_nodes,
            self.problem.temperature_lambda,
            z_values,
        )

    def gz_of(self, v2_values: np.ndarray) -> np.ndarray:
        tt = self.mesh.times[:, None]
        xx = self.mesh.xs[None, :]
        vals = np.asarray(
            evaluate(self.problem.nonlinear_G_z, {"t": tt, "x": xx, "z": v2_values}), float
        )
        return np.broadcast_to(vals, v2_values.shape)

    def g_of(self, v2_values: np.ndarray) -> np.ndarray:
        tt = self.mesh.times[:, None]
        xx = self.mesh.xs[None, :]
        vals = np.asarray(
            evaluate(self.problem.nonlinear_G, {"t": tt, "x": xx, "z": v2_values}), float
        )
        return np.broadcast_to(vals, v2_values.shape)

    def _reference_reward_diff(self) -> np.ndarray:
        """r(y_j,t,x_k,a_m) - r(x_k,t,x_k,a_m), shape (n_t, n_y, n_x, K).

        Only materialized for reference-dependent rewards, which the
        shipped benchmarks avoid; intended for small diagnostic grids.
        """
        if self._r_reference_diff is None:
            mesh = self.mesh
            tt = mesh.times[:, None, None, None]
            yy = mesh.xs[None, :, None, None]
            xx = mesh.xs[None, None, :, None]
            aa = self.quadrature.nodes[None, None, None, :]
            r_ref = np.asarray(
                evaluate(self.problem.reward_r, {"y": yy, "t": tt, "x": xx, "a": aa}), float
            )
            shape = (mesh.n_t, mesh.n_x, mesh.n_x, len(self.quadrature.nodes))
            r_ref = np.broadcast_to(r_ref, shape)
            self._r_reference_diff = r_ref - self.r_nodes[:, None, :, :]
        return self._r_reference_diff

    def gamma_sources(self, gamma: np.ndarray) -> np.ndarray | None:
        """int (r(y,.) - r(x,.)) Gamma da per (t, y, x); None when r is y-free."""
        if self.problem.reward_is_reference_free():
            return None
        diff = self._reference_reward_diff()
        w = self.quadrature.weights
        return np.einsum("m,tyxm,txm->tyx", w, diff, gamma, optimize=True)


@dataclass(frozen=True)
class IterateState:
    """Immutable snapshot of one policy-iteration sweep.

    last_increment and tol form the convergence certificate run() stamps on
    its final state; verifiers that require a converged input check them.
    """

    n: int
    slab: SlabField
    v2: Field1D
    z: Field1D
    log_partition: Field1D
    mean_drift: Field1D
    workspace: Workspace
    value_norms: dict
    last_increment: float | None = None
    tol: float | None = None

    @property
    def mesh(self) -> Mesh:
        return self.slab.mesh


@dataclass
class IterationRecord:
    n: int
    sup: float
    grad_sup: float
    hess_sup: float
    c2: float
    wall_ms: float

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "sup": self.sup,
            "grad_sup": self.grad_sup,
            "hess_sup": self.hess_sup,
            "c2": self.c2,
            "wall_ms": self.wall_ms,
        }


@dataclass
class IterationReport:
    tol: float
    max_iters: int
    converged: bool = False
    stopping_reason: str = ""
    records: list[IterationRecord] = field(default_factory=list)
    rate: object | None = None  # verify.RateFit once enough increments exist
    value_norms: dict = field(default_factory=dict)

    def increments(self) -> list[float]:
        return [r.c2 for r in self.records]

    def as_dict(self) -> dict:
        rate = None
        if self.rate is not None:
            rate = self.rate.as_dict()
        return {
            "tol": self.tol,
            "max_iters": self.max_iters,
            "converged": self.converged,
            "stopping_reason": self.stopping_reason,
            "n_iterations": len(self.records),
            "records": [r.as_dict() for r in self.records],
            "rate_fit": rate,
            "value_norms": self.value_norms,
        }

    def write_increments_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("n,sup,grad_sup,hess_sup,c2,wall_ms\n")
            for r in self.records:
                fh.write(
                    f"{r.n},{r.sup!r},{r.grad_sup!r},{r.hess_sup!r},{r.c2!r},{r.wall_ms:.3f}\n"
                )


def compute_Z(state: IterateState) -> Field1D:
    """Coupling field Z = V1_x(t,t,x,x) + G_z(t,x,V2) V2_x on the lattice.

    The diagonal gradient differentiates each stored slab row in the flow-x
    index (4th-order central stencil, one-sided 2nd-order at the edges) and
    reads it off at y = x; V2_x uses the same stencil.
    """
    return _z_from_fields(state.slab, state.v2, state.workspace)


def _z_from_fields(slab: SlabField, v2: Field1D, ws: Workspace) -> Field1D:
    dx = slab.mesh.dx
    grad_flow = deriv_x(slab.diag, dx)
    v1x_diag = np.ascontiguousarray(np.diagonal(grad_flow, axis1=1, axis2=2))
    v2x = deriv_x(v2.values, dx)
    gz = ws.gz_of(v2.values)
    return Field1D(slab.mesh, v1x_diag + gz * v2x)


InitMode = Union[str, tuple]


def initialize(problem: ProblemSpec, grid: GridSpec, init_mode: InitMode = "zero") -> IterateState:
    """Build the n = 0 state.

    init_mode is "zero", "terminal", or ("expr", v1_source, v2_source) with
    v1 over (tau, t, y, x) and v2 over (t, x).
    """
    ws = Workspace(problem, grid)
    mesh = ws.mesh
    n_t, n_x = mesh.n_t, mesh.n_x
    shape = (n_t, n_x, n_x)
    if init_mode == "zero":
        diag = np.zeros(shape)
        nxt = np.zeros(shape)
        v2_vals = np.zeros((n_t, n_x))
    elif init_mode == "terminal":
        tau = mesh.times[:, None, None]
        yy = mesh.xs[None, :, None]
        xx = mesh.xs[None, None, :]
        diag = np.ascontiguousarray(
            np.broadcast_to(
                np.asarray(
                    evaluate(problem.terminal_F, {"tau": tau, "y": yy, "x": xx}), float
                ),
                shape,
            )
        )
        nxt = diag.copy()
        h_row = np.broadcast_to(
            np.asarray(evaluate(problem.terminal_h, {"x": mesh.xs}), float), (n_x,)
        )
        v2_vals = np.tile(h_row, (n_t, 1))
    elif isinstance(init_mode, tuple) and len(init_mode) == 3 and init_mode[0] == "expr":
        v1_expr = parse(init_mode[1])
        v2_expr = parse(init_mode[2])
        tau = mesh.times[:, None, None]
        t_next = np.minimum(mesh.times + mesh.dt, mesh.times[-1])[:, None, None]
        yy = mesh.xs[None, :, None]
        xx = mesh.xs[None, None, :]
        diag = np.ascontiguousarray(
            np.broadcast_to(
                np.asarray(
                    evaluate(v1_expr, {"tau": tau, "t": tau, "y": yy, "x": xx}), float
                ),
                shape,
            )
        )
        nxt = np.ascontiguousarray(
            np.broadcast_to(
                np.asarray(
                    evaluate(v1_expr, {"tau": tau, "t": t_next, "y": yy, "x": xx}), float
                ),
                shape,
            )
        )
        v2_vals = Field1D.from_expr(mesh, v2_expr).values
    else:
        raise ValueError(f"unknown init_mode {init_mode!r}")

    full = None
    if grid.storage_mode == "full_tensor":
        full = np.zeros((n_t, n_t, n_x, n_x))
        full[:] = diag[:, None, :, :]
    slab = SlabField(mesh, diag, nxt, full)
    v2 = Field1D(mesh, v2_vals)
    z = _z_from_fields(slab, v2, ws)
    tables = ws.tables(z.values)
    return IterateState(
        n=0,
        slab=slab,
        v2=v2,
        z=z,
        log_partition=Field1D(mesh, tables.log_partition),
        mean_drift=Field1D(mesh, tables.mean_drift),
        workspace=ws,
        value_norms={
            "v1": discrete_norms(slab).as_dict(),
            "v2": discrete_norms(v2).as_dict(),
        },
    )


def step(state: IterateState) -> IterateState:
    """One policy iteration sweep: update the Gibbs policy, evaluate it."""
    ws = state.workspace
    mesh = state.mesh
    tables = ws.tables(state.z.values)
    gamma_sources = ws.gamma_sources(tables.gamma)
    slab, v2 = evaluate_policy_family(
        ws.problem,
        ws.grid,
        state.z,
        Field1D(mesh, tables.log_partition),
        Field1D(mesh, tables.mean_drift),
        gamma_sources,
    )
    z_new = _z_from_fields(slab, v2, ws)
    tables_new = ws.tables(z_new.values)
    return IterateState(
        n=state.n + 1,
        slab=slab,
        v2=v2,
        z=z_new,
        log_partition=Field1D(mesh, tables_new.log_partition),
        mean_drift=Field1D(mesh, tables_new.mean_drift),
        workspace=ws,
        value_norms={
            "v1": discrete_norms(slab).as_dict(),
            "v2": discrete_norms(v2).as_dict(),
        },
    )


def increment_norm(old: IterateState, new: IterateState) -> Norms:
    """Combined discrete C2-type increment between consecutive states."""
    mesh = old.mesh
    d_slab = _lattice_norms(new.slab.diag - old.slab.diag, mesh)
    d_v2 = _lattice_norms(new.v2.values - old.v2.values, mesh)
    return Norms(
        sup=d_slab.sup + d_v2.sup,
        dt_sup=d_slab.dt_sup + d_v2.dt_sup,
        grad_sup=d_slab.grad_sup + d_v2.grad_sup,
        hess_sup=d_slab.hess_sup + d_v2.hess_sup,
    )


def run(
    problem: ProblemSpec,
    grid: GridSpec,
    init_mode: InitMode = "zero",
    tol: float = 1e-7,
    max_iters: int = 60,
) -> tuple[IterateState, IterationReport]:
    """Iterate to the fixed point; raises NotConverged at max_iters.

    The rate fit covers iterations n in [2, n_last], discarding the
    transient of the arbitrary initializer.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    report = IterationReport(tol=tol, max_iters=max_iters)
    state = initialize(problem, grid, init_mode)
    converged = False
    for n in range(1, max_iters + 1):
        tic = time.perf_counter()
        new_state = step(state)
        wall_ms = (time.perf_counter() - tic) * 1e3
        norms = increment_norm(state, new_state)
        report.records.append(
            IterationRecord(
                n=n,
                sup=norms.sup,
                grad_sup=norms.grad_sup,
                hess_sup=norms.hess_sup,
                c2=norms.c2,
                wall_ms=wall_ms,
            )
        )
        state = new_state
        if norms.c2 <= tol:
            converged = True
            break
    report.converged = converged
    report.stopping_reason = "tolerance" if converged else "max_iters"
    report.value_norms = state.value_norms
    _attach_rate_fit(report)
    if not converged:
        raise NotConverged(report)
    state = dataclasses.replace(state, last_increment=report.records[-1].c2, tol=tol)
    return state, report


def _attach_rate_fit(report: IterationReport) -> None:
    from .verify import InsufficientData, fit_rate  # local import: verify uses pia

    ds = report.increments()
    # positions 0.. hold n = 1..; fit over n in [2, n_last]
    if len(ds) >= 4 and all(d > 0 for d in ds[1:]):
        try:
            report.rate = fit_rate(ds, window=(1, len(ds) - 1))
        except InsufficientData:
            report.rate = None


def objective_field(state: IterateState) -> Field1D:
    """J(t,x) = V1(t,t,x,x) + G(t,x,V2(t,x)) recovered on the diagonal."""
    j = state.slab.diagonal_value() + state.workspace.g_of(state.v2.values)
    return Field1D(state.mesh, j)


def policy_density_at(state: IterateState, t: float, x: float, a: float) -> float:
    """Gibbs density of the current policy at a lattice point and action."""
    ws = state.workspace
    mesh = state.mesh
    ti = np.argmin(np.abs(mesh.times - t))
    xi = np.argmin(np.abs(mesh.xs - x))
    if abs(mesh.times[ti] - t) > 1e-9 * max(1.0, mesh.times[-1]):
        raise OutOfDomain(f"t = {t} is not a lattice time node")
    if abs(mesh.xs[xi] - x) > 1e-9 * max(1.0, abs(mesh.xs[0]), abs(mesh.xs[-1])):
        raise OutOfDomain(f"x = {x} is not a lattice space node")
    a_lo, a_hi = ws.problem.action_interval
    if not (a_lo <= a <= a_hi):
        raise OutOfDomain(f"action {a} outside [{a_lo}, {a_hi}]")
    lam = ws.problem.temperature_lambda
    z = float(state.z.values[ti, xi])
    ctx = gibbs_mod.GibbsContext(
        ws.quadrature, ws.b_nodes[ti, xi], ws.r_nodes[ti, xi], lam
    )
    h = gibbs_mod.log_partition(ctx, z)
    b_a = evaluate(ws.problem.drift_b, {"t": float(t), "x": float(x), "a": float(a)})
    r_a = evaluate(
        ws.problem.reward_r, {"y": float(x), "t": float(t), "x": float(x), "a": float(a)}
    )
    return float(np.exp((b_a * z + r_a - h) / lam))
