import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softeq.coeffexpr import evaluate
from softeq.model import GridSpec, ProblemSpec
from softeq.pde1d import (
    Field1D,
    Mesh,
    SingularSystem,
    SlabField,
    TridiagFactor,
    deriv_x,
    deriv_xx,
    discount_at_lags,
    evaluate_policy_family,
    solve_backward,
)
from softeq.pia import Workspace


def mesh_for(n_x, n_t, T, dom=20.0, buf_units=3.0):
    dx = 2 * dom / (n_x - 1)
    buf = int(np.ceil(buf_units / dx))
    grid = GridSpec(x_min=-dom, x_max=dom, n_x=n_x, n_t=n_t, n_a=4, boundary_buffer=buf)
    return Mesh.from_grid(grid, T)


class TestSolveBackward:
    def test_constants_are_exact_everywhere(self):
        mesh = mesh_for(65, 17, 0.5)
        drift = Field1D(mesh, 0.9 * np.sin(mesh.xs)[None, :].repeat(mesh.n_t, axis=0))
        sig2 = Field1D.constant(mesh, 1.3)
        v = solve_backward(drift, sig2, None, np.full(mesh.n_x, 3.0))
        assert np.max(np.abs(v.values - 3.0)) <= 1e-12

    @pytest.mark.parametrize("mu", [0.8, -0.8, 0.0])
    def test_linear_profiles_are_exact(self, mu):
        mesh = mesh_for(65, 17, 0.5)
        v = solve_backward(
            Field1D.constant(mesh, mu), Field1D.constant(mesh, 1.0), None, mesh.xs.copy()
        )
        exact = mesh.xs[None, :] + mu * (mesh.times[-1] - mesh.times[:, None])
        assert np.max(np.abs((v.values - exact)[:, mesh.interior])) <= 1e-10

    def test_heat_kernel_solution(self):
        mesh = mesh_for(65, 17, 0.5)
        v = solve_backward(
            Field1D.constant(mesh, 0.0), Field1D.constant(mesh, 1.0), None, np.sin(mesh.xs)
        )
        exact = np.exp(-(mesh.times[-1] - mesh.times[:, None]) / 2) * np.sin(mesh.xs)
        err = np.max(np.abs((v.values - exact)[:, mesh.interior]))
        assert err <= 1e-2  # first-order scheme at a coarse grid

    def test_heat_refinement_order(self):
        errs, hs = [], []
        for n_x in (65, 129, 257, 513):
            mesh = mesh_for(n_x, (n_x + 3) // 4, 0.5)
            v = solve_backward(
                Field1D.constant(mesh, 0.0),
                Field1D.constant(mesh, 1.0),
                None,
                np.sin(mesh.xs),
            )
            exact = np.exp(-(mesh.times[-1] - mesh.times[:, None]) / 2) * np.sin(mesh.xs)
            errs.append(np.max(np.abs((v.values - exact)[:, mesh.interior])))
            hs.append(mesh.dx + mesh.dt)
        order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert order >= 0.9

    def test_manufactured_solution_order(self):
        # V = e^t sin x with the source chosen to match, drift on
        mu, T = 0.8, 0.25
        errs, hs = [], []
        for n_x in (65, 129, 257, 513):
            mesh = mesh_for(n_x, (n_x + 1) // 2, T, buf_units=5.0)
            tt, xx = mesh.times[:, None], mesh.xs[None, :]
            source = -(
                np.exp(tt) * np.sin(xx)
                - 0.5 * np.exp(tt) * np.sin(xx)
                + mu * np.exp(tt) * np.cos(xx)
            )
            v = solve_backward(
                Field1D.constant(mesh, mu),
                Field1D.constant(mesh, 1.0),
                source,
                np.exp(T) * np.sin(mesh.xs),
            )
            errs.append(np.max(np.abs((v.values - np.exp(tt) * np.sin(xx))[:, mesh.interior])))
            hs.append(mesh.dx + mesh.dt)
        order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert order >= 0.9

    def test_linearity(self):
        mesh = mesh_for(33, 9, 0.5)
        rng = np.random.default_rng(5)
        drift = Field1D(mesh, rng.uniform(-1, 1, (mesh.n_t, mesh.n_x)))
        sig2 = Field1D(mesh, rng.uniform(0.5, 2.0, (mesh.n_t, mesh.n_x)))
        f1 = rng.standard_normal((mesh.n_t, mesh.n_x))
        f2 = rng.standard_normal((mesh.n_t, mesh.n_x))
        g1 = rng.standard_normal(mesh.n_x)
        g2 = rng.standard_normal(mesh.n_x)
        a, b = 1.7, -0.4
        combined = solve_backward(drift, sig2, a * f1 + b * f2, a * g1 + b * g2)
        split = a * solve_backward(drift, sig2, f1, g1).values + b * solve_backward(
            drift, sig2, f2, g2
        ).values
        assert np.max(np.abs(combined.values - split)) <= 1e-10

    @given(
        st.floats(-1.0, 1.0),
        st.integers(1, 4),
        st.floats(-2.0, 2.0),
        st.floats(-2.0, 2.0),
        st.integers(1, 5),
        st.floats(0.3, 1.5),
    )
    @settings(max_examples=60, deadline=None)
    def test_comparison_principle(self, amp, k, b_sin, b_cos, q, sig):
        # zero source, drift tapered to vanish at the truncation walls:
        # there the scheme is a convex combination row by row, so the
        # terminal bounds must hold everywhere up to rounding
        mesh = mesh_for(33, 9, 0.5, dom=10.0)
        taper = 1.0 - (mesh.xs / mesh.xs[-1]) ** 2
        mu_row = amp * np.sin(k * mesh.xs) * taper
        drift = Field1D(mesh, np.tile(mu_row, (mesh.n_t, 1)))
        sig2 = Field1D.constant(mesh, sig**2)
        terminal = b_sin * np.sin(q * mesh.xs) + b_cos * np.cos(q * mesh.xs)
        v = solve_backward(drift, sig2, None, terminal)
        assert np.min(v.values) >= terminal.min() - 1e-12
        assert np.max(v.values) <= terminal.max() + 1e-12

    def test_reaction_term_discrete_closed_form(self):
        mesh = mesh_for(33, 17, 1.0)
        c = 0.8
        v = solve_backward(
            Field1D.constant(mesh, 0.0),
            Field1D.constant(mesh, 1.0),
            None,
            np.ones(mesh.n_x),
            reaction=Field1D.constant(mesh, c),
        )
        levels = np.arange(mesh.n_t)
        factor = (1.0 + c * mesh.dt) ** (-(mesh.n_t - 1 - levels))
        assert np.max(np.abs(v.values - factor[:, None])) <= 1e-13
        # and within O(dt) of the continuous discounted value
        cont = np.exp(-c * (mesh.times[-1] - mesh.times))
        assert np.max(np.abs(v.values[:, 0] - cont)) <= c**2 * mesh.dt

    def test_crank_nicolson_is_more_accurate_on_heat(self):
        # coarse time, fine space: the first-order time error dominates
        mesh = mesh_for(257, 9, 0.5)
        exact = np.exp(-(mesh.times[-1] - mesh.times[:, None]) / 2) * np.sin(mesh.xs)
        kw = dict(
            drift=Field1D.constant(mesh, 0.0),
            diffusion_sq=Field1D.constant(mesh, 1.0),
            source=None,
            terminal=np.sin(mesh.xs),
        )
        err_ie = np.max(np.abs((solve_backward(**kw).values - exact)[:, mesh.interior]))
        err_cn = np.max(
            np.abs((solve_backward(**kw, scheme="crank_nicolson").values - exact)[:, mesh.interior])
        )
        assert err_cn < err_ie / 3

    def test_t_start_index(self):
        mesh = mesh_for(33, 9, 0.5)
        v = solve_backward(
            Field1D.constant(mesh, 0.2),
            Field1D.constant(mesh, 1.0),
            None,
            mesh.xs.copy(),
            t_start_index=4,
        )
        assert np.all(v.values[:4] == 0.0)
        assert np.any(v.values[4] != 0.0)


def test_singular_pivot_detected():
    with pytest.raises(SingularSystem):
        TridiagFactor(np.array([0.0, 1.0, 1.0]), np.array([0.0, 2.0, 2.0]), np.array([1.0, 1.0, 0.0]))
    with pytest.raises(SingularSystem):
        # elimination drives the second pivot to zero
        TridiagFactor(np.array([0.0, 1.0, 0.0]), np.array([1.0, 1.0, 1.0]), np.array([1.0, 0.0, 0.0]))


class TestDerivatives:
    def test_exact_on_linears_everywhere(self):
        xs = np.linspace(-2, 3, 17)
        dx = xs[1] - xs[0]
        vals = 2.5 * xs - 1.0
        assert np.max(np.abs(deriv_x(vals, dx) - 2.5)) <= 1e-12

    def test_exact_on_quadratics_everywhere(self):
        xs = np.linspace(-2, 3, 17)
        dx = xs[1] - xs[0]
        vals = xs**2
        assert np.max(np.abs(deriv_x(vals, dx) - 2 * xs)) <= 1e-11
        assert np.max(np.abs(deriv_xx(vals, dx)[1:-1] - 2.0)) <= 1e-11

    def test_fourth_order_interior(self):
        xs = np.linspace(-2, 3, 17)
        dx = xs[1] - xs[0]
        vals = xs**4
        assert np.max(np.abs(deriv_x(vals, dx)[2:-2] - 4 * xs[2:-2] ** 3)) <= 1e-9


def family_problem(reward="0", delta="1/(1+0.3*s)", terminal_F="0", drift="0", lam=1.0,
                   interval=(0.0, 2.0)):
    return ProblemSpec.from_strings(
        {
            "drift_b": drift,
            "vol_sigma": "1",
            "reward_r": reward,
            "discount_delta": delta,
            "terminal_F": terminal_F,
            "terminal_h": "0",
            "nonlinear_G": "0",
            "nonlinear_G_z": "0",
        },
        temperature_lambda=lam,
        horizon_T=1.0,
        action_interval=interval,
    )


def run_family(problem, grid):
    ws = Workspace(problem, grid)
    mesh = ws.mesh
    z = Field1D(mesh, np.zeros((mesh.n_t, mesh.n_x)))
    tables = ws.tables(z.values)
    return (
        ws,
        evaluate_policy_family(
            problem,
            grid,
            z,
            Field1D(mesh, tables.log_partition),
            Field1D(mesh, tables.mean_drift),
            ws.gamma_sources(tables.gamma),
        ),
    )


class TestPolicyFamily:
    def test_entropy_only_closed_form(self):
        # r = 0, F = 0, b = 0: spatially constant transport solution
        # V1(tau, t) = lam ln|A| int_t^T delta(s - tau) ds
        problem = family_problem()
        grid = GridSpec(x_min=-2, x_max=2, n_x=9, n_t=400, n_a=8, boundary_buffer=2)
        ws, (slab, v2) = run_family(problem, grid)
        mesh = ws.mesh
        rho, lam_ln = 0.3, math.log(2.0)
        worst = 0.0
        for i in range(mesh.n_t):
            tau = mesh.times[i]
            exact = lam_ln * (math.log(1 + rho * (1.0 - tau)) - math.log(1.0)) / rho
            worst = max(worst, float(np.max(np.abs(slab.diag[i] - exact))))
        assert worst <= 1e-6
        # spatially constant
        assert np.max(np.abs(slab.diag - slab.diag[:, :1, :1])) <= 1e-12

    def test_v2_linear_exactness(self):
        problem = ProblemSpec.from_strings(
            {
                "drift_b": "0.4",
                "vol_sigma": "1",
                "reward_r": "0",
                "discount_delta": "1/(1+0.1*s)",
                "terminal_F": "0",
                "terminal_h": "x",
                "nonlinear_G": "0",
                "nonlinear_G_z": "0",
            },
            temperature_lambda=1.0,
            horizon_T=1.0,
            action_interval=(0.0, 1.0),
        )
        grid = GridSpec(x_min=-5, x_max=5, n_x=33, n_t=17, n_a=8, boundary_buffer=2)
        ws, (slab, v2) = run_family(problem, grid)
        mesh = ws.mesh
        exact = mesh.xs[None, :] + 0.4 * (1.0 - mesh.times[:, None])
        assert np.max(np.abs(v2.values - exact)) <= 1e-10

    def test_reference_terminal_passes_through(self):
        grid = GridSpec(x_min=-2, x_max=2, n_x=9, n_t=7, n_a=8, boundary_buffer=2)
        base = family_problem(terminal_F="0")
        with_y = family_problem(terminal_F="y")
        _, (slab0, _) = run_family(base, grid)
        ws, (slab1, _) = run_family(with_y, grid)
        expected = ws.mesh.xs[None, :, None]
        assert np.max(np.abs((slab1.diag - slab0.diag) - expected)) <= 1e-12

    def test_batched_family_matches_single_solves_bitwise(self):
        # reference-dependent reward so the per-member sources differ
        problem = family_problem(
            reward="tanh(y) - 0.2*tanh(x) + 0.1*a", drift="0.3*a - 0.1", interval=(0.0, 1.0)
        )
        grid = GridSpec(x_min=-2, x_max=2, n_x=9, n_t=7, n_a=8, boundary_buffer=2)
        ws = Workspace(problem, grid)
        mesh = ws.mesh
        rng = np.random.default_rng(2)
        z = Field1D(mesh, rng.uniform(-1, 1, (mesh.n_t, mesh.n_x)))
        tables = ws.tables(z.values)
        h_field = Field1D(mesh, tables.log_partition)
        hz_field = Field1D(mesh, tables.mean_drift)
        sources = ws.gamma_sources(tables.gamma)
        slab, v2 = evaluate_policy_family(problem, grid, z, h_field, hz_field, sources)

        sig2 = Field1D.from_expr(mesh, problem.vol_sigma)
        sig2 = Field1D(mesh, sig2.values**2)
        lags = discount_at_lags(problem, mesh)
        base = h_field.values - hz_field.values * z.values
        f_term = np.asarray(
            evaluate(problem.terminal_F, {"tau": mesh.times[:, None, None],
                                          "y": mesh.xs[None, :, None],
                                          "x": mesh.xs[None, None, :]}),
            float,
        )
        f_term = np.broadcast_to(f_term, (mesh.n_t, mesh.n_x, mesh.n_x))
        for i in (0, 3, mesh.n_t - 2):
            for j in (1, 4, mesh.n_x - 2):
                src = np.zeros((mesh.n_t, mesh.n_x))
                for level in range(i, mesh.n_t):
                    g = base[level] + sources[level][j]
                    src[level] = lags[level - i] * g
                ref = solve_backward(
                    hz_field, sig2, src, f_term[i, j].copy(), t_start_index=i
                )
                assert np.array_equal(ref.values[i], slab.diag[i, j])
                if i + 1 < mesh.n_t:
                    assert np.array_equal(ref.values[i + 1], slab.next_rows[i, j])

    def test_full_tensor_matches_diag(self):
        problem = family_problem()
        grid = GridSpec(
            x_min=-2, x_max=2, n_x=9, n_t=7, n_a=8, boundary_buffer=2,
            storage_mode="full_tensor",
        )
        ws, (slab, v2) = run_family(problem, grid)
        for i in range(ws.mesh.n_t):
            assert np.array_equal(slab.full[i, i], slab.diag[i])


def test_field_shape_and_finiteness_checks():
    mesh = mesh_for(33, 9, 0.5)
    with pytest.raises(ValueError):
        Field1D(mesh, np.zeros((3, 3)))
    bad = np.zeros((mesh.n_t, mesh.n_x))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        Field1D(mesh, bad)


def test_slab_diagonal_value():
    mesh = mesh_for(33, 9, 0.5)
    diag = np.zeros((mesh.n_t, mesh.n_x, mesh.n_x))
    diag[:] = mesh.xs[None, None, :] * 2.0
    slab = SlabField(mesh, diag, diag.copy())
    assert np.allclose(slab.diagonal_value(), 2.0 * mesh.xs[None, :])
