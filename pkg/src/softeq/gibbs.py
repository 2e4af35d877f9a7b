"""Action-space quadrature and Gibbs-measure quantities.

Everything the policy machinery needs from the action space reduces to
integrals of the form  int_A phi(a) exp((b(a) z + r(a)) / lambda) da.  The
action interval is discretized once with a composite Gauss-Legendre rule and
the density is only ever represented by its values at the quadrature nodes.

The log-partition

    H(z) = lambda * ln int_A exp((b(a) z + r(a)) / lambda) da

overflows naively for small lambda or large |z|, so it is always computed
with a max-shift (log-sum-exp).  Useful identities, all exercised by tests:
dH/dz equals the Gibbs mean of b, d2H/dz2 its Gibbs variance (hence >= 0),
and the entropy satisfies
lambda * entropy = H - z * mean(b) - mean(r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coeffexpr import evaluate
from .model import ProblemSpec


class InvalidInterval(ValueError):
    """Bad action interval or node count for quadrature construction."""


@dataclass(frozen=True)
class ActionQuadrature:
    """Composite Gauss-Legendre rule on the action interval."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise InvalidInterval("quadrature weights must be positive")
        if np.any(np.diff(self.nodes) <= 0):
            raise InvalidInterval("quadrature nodes must be strictly increasing")

    @property
    def volume(self) -> float:
        return float(np.sum(self.weights))

    def integrate(self, values: np.ndarray) -> float:
        return float(np.dot(self.weights, values))


_PANEL_SIZE = 8


def build_quadrature(a_lo: float, a_hi: float, n_a: int) -> ActionQuadrature:
    """Composite Gauss-Legendre rule with panels of (up to) 8 nodes.

    n_a is the total node count; panels split [a_lo, a_hi] into equal
    subintervals.  Spectrally accurate for the smooth integrands the model
    assumptions guarantee.
    """
    if not a_lo < a_hi:
        raise InvalidInterval(f"need a_lo < a_hi, got [{a_lo}, {a_hi}]")
    if n_a < 4:
        raise InvalidInterval(f"need at least 4 quadrature nodes, got {n_a}")
    n_panels = -(-n_a // _PANEL_SIZE)
    sizes = [_PANEL_SIZE] * (n_panels - 1)
    sizes.append(n_a - _PANEL_SIZE * (n_panels - 1))
    edges = np.linspace(a_lo, a_hi, n_panels + 1)
    nodes, weights = [], []
    for p, size in enumerate(sizes):
        u, w = np.polynomial.legendre.leggauss(size)
        mid = 0.5 * (edges[p] + edges[p + 1])
        half = 0.5 * (edges[p + 1] - edges[p])
        nodes.append(mid + half * u)
        weights.append(half * w)
    return ActionQuadrature(np.concatenate(nodes), np.concatenate(weights))


@dataclass(frozen=True)
class GibbsContext:
    """Per-(t,x) cache of coefficient values at the quadrature nodes."""

    quadrature: ActionQuadrature
    b_values: np.ndarray  # b(t, x, a_k)
    r_values: np.ndarray  # r(x, t, x, a_k), reference state on the diagonal
    lam: float

    def __post_init__(self):
        n = len(self.quadrature.nodes)
        if len(self.b_values) != n or len(self.r_values) != n:
            raise ValueError("coefficient caches must match the node count")


def context_at(
    problem: ProblemSpec, quadrature: ActionQuadrature, t: float, x: float
) -> GibbsContext:
    """Evaluate the drift and diagonal-reference reward at the nodes."""
    a = quadrature.nodes
    b_vals = np.broadcast_to(
        np.asarray(evaluate(problem.drift_b, {"t": t, "x": x, "a": a}), dtype=float),
        a.shape,
    ).copy()
    r_vals = np.broadcast_to(
        np.asarray(
            evaluate(problem.reward_r, {"y": x, "t": t, "x": x, "a": a}), dtype=float
        ),
        a.shape,
    ).copy()
    return GibbsContext(quadrature, b_vals, r_vals, problem.temperature_lambda)


def _log_norm(weights, b_values, r_values, lam, z):
    """log int exp((b z + r)/lam) da, stabilized; broadcasts over leading axes."""
    exponent = (b_values * np.asarray(z)[..., None] + r_values) / lam
    shift = np.max(exponent, axis=-1, keepdims=True)
    lse = np.log(np.sum(weights * np.exp(exponent - shift), axis=-1))
    return exponent, shift[..., 0] + lse


def log_partition(ctx: GibbsContext, z: float) -> float:
    """H(z) = lam * ln int exp((b z + r)/lam) da.  Finite for all finite z."""
    _, log_norm = _log_norm(ctx.quadrature.weights, ctx.b_values, ctx.r_values, ctx.lam, z)
    return ctx.lam * float(log_norm)


def gibbs_density(ctx: GibbsContext, z: float) -> np.ndarray:
    """Density values Gamma_k at the quadrature nodes; sum w_k Gamma_k = 1."""
    exponent, log_norm = _log_norm(
        ctx.quadrature.weights, ctx.b_values, ctx.r_values, ctx.lam, z
    )
    return np.exp(exponent - log_norm)


def mean_drift(ctx: GibbsContext, z: float) -> float:
    """Gibbs mean of the drift; equals dH/dz."""
    gamma = gibbs_density(ctx, z)
    return float(np.sum(ctx.quadrature.weights * ctx.b_values * gamma))


def drift_variance(ctx: GibbsContext, z: float) -> float:
    """Gibbs variance of the drift; equals d2H/dz2, never below -1e-12."""
    gamma = gibbs_density(ctx, z)
    w = ctx.quadrature.weights
    mean = np.sum(w * ctx.b_values * gamma)
    return float(np.sum(w * ctx.b_values**2 * gamma) - mean**2)


def entropy(ctx: GibbsContext, z: float) -> float:
    """Shannon entropy -int Gamma ln Gamma da of the Gibbs density."""
    exponent, log_norm = _log_norm(
        ctx.quadrature.weights, ctx.b_values, ctx.r_values, ctx.lam, z
    )
    log_gamma = exponent - log_norm[..., None]
    gamma = np.exp(log_gamma)
    return float(-np.sum(ctx.quadrature.weights * gamma * log_gamma))


@dataclass(frozen=True)
class GibbsTables:
    """Lattice-wide Gibbs quantities for one value of the coupling field.

    All arrays share leading shape (n_t, n_x); gamma adds the node axis.
    """

    log_partition: np.ndarray
    mean_drift: np.ndarray
    gamma: np.ndarray


def gibbs_tables(
    weights: np.ndarray, b_values: np.ndarray, r_values: np.ndarray, lam: float, z: np.ndarray
) -> GibbsTables:
    """Vectorized H, H_z, Gamma over a (t, x) lattice.

    b_values and r_values have shape lattice + (n_nodes,); z has the lattice
    shape.  Identical formulas to the scalar GibbsContext operations.
    """
    exponent, log_norm = _log_norm(weights, b_values, r_values, lam, z)
    gamma = np.exp(exponent - log_norm[..., None])
    mean = np.sum(weights * b_values * gamma, axis=-1)
    return GibbsTables(lam * log_norm, mean, gamma)
