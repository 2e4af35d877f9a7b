"""Policy iteration for entropy-regularized time-inconsistent control in 1-D.

The solver alternates a softmax (Gibbs) policy update with a linear
policy-evaluation PDE sweep on a truncated grid, tracking discrete parabolic
norms until the iterates stop moving; the verify module cross-checks the
result with Monte Carlo, residual, and deviation-based oracles.
"""

from .coeffexpr import (
    DomainError,
    Expr,
    ParseError,
    UnboundVariable,
    UnknownIdentifier,
    evaluate,
    parse,
    to_source,
)
from .gibbs import (
    ActionQuadrature,
    GibbsContext,
    InvalidInterval,
    build_quadrature,
    context_at,
    drift_variance,
    entropy,
    gibbs_density,
    log_partition,
    mean_drift,
)
from .model import (
    GridSpec,
    ProblemSpec,
    UnknownProblem,
    ValidationError,
    ValidationReport,
    builtin_problem,
    validate,
)
from .pde1d import (
    Field1D,
    MemoryCap,
    Mesh,
    SingularSystem,
    SlabField,
    evaluate_policy_family,
    solve_backward,
)
from .pia import (
    IterateState,
    IterationReport,
    NotConverged,
    OutOfDomain,
    compute_Z,
    discrete_norms,
    initialize,
    objective_field,
    policy_density_at,
    run,
    step,
)
from .verify import (
    InsufficientData,
    McConfig,
    McResult,
    NonPositiveIncrement,
    RateFit,
    boundary_sensitivity,
    eehjb_residual,
    equilibrium_residual,
    fit_rate,
    mc_value,
    tc_reduction_suite,
)

__version__ = "0.1.0"
