import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softeq.gibbs import (
    ActionQuadrature,
    GibbsContext,
    InvalidInterval,
    build_quadrature,
    context_at,
    drift_variance,
    entropy,
    gibbs_density,
    gibbs_tables,
    log_partition,
    mean_drift,
)
from softeq.model import builtin_problem


def linear_drift_ctx(a_lo=0.0, a_hi=1.0, n_a=16, lam=1.0, r=None):
    quad = build_quadrature(a_lo, a_hi, n_a)
    r_vals = np.zeros_like(quad.nodes) if r is None else r(quad.nodes)
    return GibbsContext(quad, quad.nodes.copy(), r_vals, lam)


def flat_ctx(a_lo=0.0, a_hi=1.0, n_a=16, lam=1.0):
    quad = build_quadrature(a_lo, a_hi, n_a)
    return GibbsContext(quad, np.zeros_like(quad.nodes), np.zeros_like(quad.nodes), lam)


class TestQuadrature:
    def test_weights_sum_to_volume(self):
        quad = build_quadrature(0.0, 1.0, 8)
        assert quad.volume == pytest.approx(1.0, abs=1e-12)
        quad = build_quadrature(-2.0, 3.0, 20)
        assert quad.volume == pytest.approx(5.0, rel=1e-12)

    def test_polynomial_exactness(self):
        quad = build_quadrature(0.0, 1.0, 8)
        assert quad.integrate(quad.nodes) == pytest.approx(0.5, abs=1e-12)

    def test_exponential_integrand(self):
        quad = build_quadrature(0.0, 1.0, 16)
        assert quad.integrate(np.exp(quad.nodes)) == pytest.approx(
            math.e - 1.0, abs=1e-10
        )

    def test_nodes_strictly_increasing(self):
        quad = build_quadrature(0.0, 1.0, 20)
        assert np.all(np.diff(quad.nodes) > 0)
        assert len(quad.nodes) == 20

    def test_small_node_counts(self):
        quad = build_quadrature(0.0, 1.0, 4)
        assert len(quad.nodes) == 4
        assert quad.volume == pytest.approx(1.0, abs=1e-12)

    def test_invalid_interval(self):
        with pytest.raises(InvalidInterval):
            build_quadrature(1.0, 0.0, 8)
        with pytest.raises(InvalidInterval):
            build_quadrature(0.0, 1.0, 3)


class TestLogPartition:
    def test_unit_volume_flat(self):
        ctx = flat_ctx(0.0, 1.0)
        for z in (-5.0, 0.0, 3.0):
            assert log_partition(ctx, z) == pytest.approx(0.0, abs=1e-13)

    def test_flat_gives_log_volume(self):
        ctx = flat_ctx(0.0, 2.0)
        assert log_partition(ctx, 7.0) == pytest.approx(math.log(2.0), abs=1e-13)

    def test_linear_drift_closed_form(self):
        ctx = linear_drift_ctx()
        assert log_partition(ctx, 1.0) == pytest.approx(math.log(math.e - 1), abs=1e-12)

    def test_stable_for_extreme_arguments(self):
        ctx = linear_drift_ctx(lam=1e-3)
        for z in (-200.0, 200.0):
            assert math.isfinite(log_partition(ctx, z))


class TestDensity:
    def test_uniform_at_zero_coupling(self):
        ctx = flat_ctx(0.0, 2.0)
        assert np.allclose(gibbs_density(ctx, 0.0), 0.5, atol=1e-14)

    def test_truncated_exponential(self):
        ctx = linear_drift_ctx(n_a=16)
        gamma = gibbs_density(ctx, 1.0)
        expected = np.exp(ctx.quadrature.nodes) / (math.e - 1)
        assert np.allclose(gamma, expected, atol=1e-12)
        # node closest to a = 0
        assert gamma[0] == pytest.approx(
            math.exp(ctx.quadrature.nodes[0]) / (math.e - 1), abs=1e-12
        )

    def test_high_temperature_limit(self):
        ctx = linear_drift_ctx(lam=1e6, r=lambda a: np.sin(3 * a))
        gamma = gibbs_density(ctx, 2.0)
        assert np.max(np.abs(gamma - 1.0)) <= 1e-4  # |A| = 1

    def test_normalization(self):
        ctx = linear_drift_ctx(r=lambda a: -np.exp(-a))
        for z in (-10.0, -1.0, 0.0, 2.0, 10.0):
            gamma = gibbs_density(ctx, z)
            assert np.all(gamma > 0)
            total = np.dot(ctx.quadrature.weights, gamma)
            assert total == pytest.approx(1.0, abs=1e-10)


class TestMoments:
    def test_mean_of_uniform(self):
        ctx = linear_drift_ctx()
        assert mean_drift(ctx, 0.0) == pytest.approx(0.5, abs=1e-12)

    def test_tilted_mean_closed_form(self):
        # int_0^1 a e^a da = 1 by parts, so the mean is 1/(e-1)
        ctx = linear_drift_ctx()
        assert mean_drift(ctx, 1.0) == pytest.approx(1 / (math.e - 1), abs=1e-12)

    def test_mean_is_partition_gradient(self):
        ctx = linear_drift_ctx(r=lambda a: np.cos(2 * a))
        h = 1e-5
        for z in np.linspace(-10, 10, 11):
            fd = (log_partition(ctx, z + h) - log_partition(ctx, z - h)) / (2 * h)
            assert abs(mean_drift(ctx, z) - fd) <= 1e-6

    def test_variance_of_uniform(self):
        ctx = linear_drift_ctx()
        assert drift_variance(ctx, 0.0) == pytest.approx(1 / 12, abs=1e-12)

    def test_variance_degenerate(self):
        quad = build_quadrature(0.0, 1.0, 8)
        ctx = GibbsContext(quad, np.full_like(quad.nodes, 0.7), np.zeros_like(quad.nodes), 1.0)
        assert abs(drift_variance(ctx, 3.0)) <= 1e-14

    def test_variance_is_partition_curvature(self):
        ctx = linear_drift_ctx()
        h = 1e-3
        fd = (
            log_partition(ctx, 1.0 + h)
            - 2 * log_partition(ctx, 1.0)
            + log_partition(ctx, 1.0 - h)
        ) / h**2
        assert abs(drift_variance(ctx, 1.0) - fd) <= 1e-4


class TestEntropy:
    def test_uniform_entropy(self):
        ctx = flat_ctx(0.0, 2.0)
        assert entropy(ctx, 0.0) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_tilted_entropy_closed_form(self):
        # entropy = H - z dH/dz when the reward vanishes and lam = 1
        ctx = linear_drift_ctx()
        expected = math.log(math.e - 1) - 1 / (math.e - 1)
        assert entropy(ctx, 1.0) == pytest.approx(expected, abs=1e-12)

    def test_entropy_identity(self):
        ctx = linear_drift_ctx(lam=0.7, r=lambda a: np.tanh(a - 0.3))
        w = ctx.quadrature.weights
        for z in (-4.0, 0.0, 1.5, 8.0):
            gamma = gibbs_density(ctx, z)
            lhs = entropy(ctx, z)
            rhs = (
                log_partition(ctx, z)
                - z * mean_drift(ctx, z)
                - np.sum(w * ctx.r_values * gamma)
            ) / ctx.lam
            assert abs(lhs - rhs) <= 1e-10


def test_translation_invariance_of_density():
    ctx = linear_drift_ctx(r=lambda a: np.sin(a))
    shifted = GibbsContext(
        ctx.quadrature, ctx.b_values, ctx.r_values + 3.7, ctx.lam
    )
    for z in (-2.0, 0.0, 5.0):
        assert np.max(np.abs(gibbs_density(ctx, z) - gibbs_density(shifted, z))) <= 1e-12
        assert log_partition(shifted, z) - log_partition(ctx, z) == pytest.approx(
            3.7, abs=1e-12
        )


def test_context_at_matches_expressions():
    problem = builtin_problem("consumption_exp", {})
    quad = build_quadrature(0.1, 0.9, 8)
    ctx = context_at(problem, quad, t=0.25, x=0.5)
    assert np.allclose(ctx.b_values, 1.0 - quad.nodes, atol=1e-14)
    assert np.allclose(
        ctx.r_values, -np.exp(-quad.nodes * math.exp(0.5)), atol=1e-14
    )


def test_gibbs_tables_match_scalar_path():
    problem = builtin_problem("consumption_exp", {})
    quad = build_quadrature(0.1, 0.9, 8)
    ts = np.linspace(0, 1, 4)
    xs = np.linspace(-1, 1, 5)
    b = np.empty((4, 5, 8))
    r = np.empty((4, 5, 8))
    ctxs = {}
    for i, t in enumerate(ts):
        for j, x in enumerate(xs):
            ctx = context_at(problem, quad, float(t), float(x))
            ctxs[i, j] = ctx
            b[i, j] = ctx.b_values
            r[i, j] = ctx.r_values
    z = np.linspace(-2, 2, 20).reshape(4, 5)
    tables = gibbs_tables(quad.weights, b, r, 1.0, z)
    for (i, j), ctx in ctxs.items():
        assert tables.log_partition[i, j] == pytest.approx(
            log_partition(ctx, z[i, j]), abs=1e-12
        )
        assert tables.mean_drift[i, j] == pytest.approx(
            mean_drift(ctx, z[i, j]), abs=1e-12
        )


@given(
    st.lists(st.floats(-3, 3), min_size=8, max_size=8),
    st.lists(st.floats(-3, 3), min_size=8, max_size=8),
    st.floats(-10, 10),
    st.floats(0.05, 5.0),
)
@settings(max_examples=150)
def test_gibbs_family_properties(b_list, r_list, z, lam):
    quad = build_quadrature(-1.0, 1.0, 8)
    ctx = GibbsContext(quad, np.asarray(b_list), np.asarray(r_list), lam)
    gamma = gibbs_density(ctx, z)
    assert np.all(gamma > 0)
    assert np.dot(quad.weights, gamma) == pytest.approx(1.0, abs=1e-10)
    assert drift_variance(ctx, z) >= -1e-12
    h = 1e-5
    fd = (log_partition(ctx, z + h) - log_partition(ctx, z - h)) / (2 * h)
    assert abs(mean_drift(ctx, z) - fd) <= 1e-6
    w = quad.weights
    identity = (
        log_partition(ctx, z)
        - z * mean_drift(ctx, z)
        - np.sum(w * ctx.r_values * gamma)
    ) / lam
    assert abs(entropy(ctx, z) - identity) <= 1e-10
