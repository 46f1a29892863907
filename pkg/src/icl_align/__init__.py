"""Generalization error of in-context linear regression under task-covariance shift."""

__version__ = "0.1.0"

from .covariance import (  # noqa: E402
    CovarianceSpec,
    make_isotropic,
    make_lowrank,
    make_powerlaw,
    make_spike,
    make_uniform_linear,
    project_onto_basis,
)
from .exceptions import (  # noqa: E402
    BoundaryError,
    ConvergenceError,
    DegenerateInputError,
    IllConditionedError,
    InvalidArgumentError,
    UnsupportedParameterError,
)
from .theory import (  # noqa: E402
    ModelParams,
    SolverSolution,
    TheoryErrors,
    context_length_curve,
    gamma_equivalent_diag,
    icl_error_limit,
    solve_self_consistent,
    stieltjes_m,
    stieltjes_m_prime,
    theory_errors,
)
from .alignment import AlignmentReport, alignment_report, cka, ruhe_bounds, spearman  # noqa: E402
from .simulator import (  # noqa: E402
    GammaEstimator,
    SimConfig,
    SimResult,
    empirical_test_error,
    fit_gamma,
    population_test_error,
    run_simulation,
    sample_batch,
)
from .estimators import ContextFeaturizer, ReducedAttentionRegressor, make_icl_pipeline  # noqa: E402
