"""Regularized FIR identification with marginal-likelihood hyper-parameter
tuning, closed-form asymptotic limit quantities, and a seeded Monte-Carlo
verification harness."""

__version__ = "0.1.0"

from .asymptotics import (
    AsymptoticReport,
    ExpansionTerms,
    SecondOrderStats,
    asymptotic_report,
    c_gamma,
    condition_bounds,
    eta_star,
    expansion_terms,
    ridge_report,
    second_order_stats,
    sigma_matrix,
    hyper_parameter_law,
    ls_error_covariances,
    regularized_error_moments,
    unvec,
    vec,
)
from .errors import (
    ConfigError,
    DegenerateBoundWarning,
    DegenerateTruthError,
    FirasymError,
    NotPositiveDefiniteError,
    OutOfBoxError,
    RankDeficientError,
    SingularHessianWarning,
)
from .estimators import (
    EbFit,
    KernelSpec,
    OptimizerOptions,
    OptimizerStats,
    eb_cost,
    eb_estimate,
    kernel_matrix,
    ls_estimate,
    minimize_box,
    noise_variance_estimate,
    rls_estimate,
)
from .montecarlo import (
    AggregateMetrics,
    ExperimentConfig,
    ExperimentOutcome,
    RecordResult,
    compare_amse,
    fit_g,
    run_experiment,
    table1,
)
from .signals import (
    Dataset,
    FilterSpec,
    FirSystem,
    ImpulseSequence,
    NoiseSpec,
    SecondOrderAR,
    autocovariance,
    build_dataset,
    derive_stream,
    generate_input,
    generate_t1,
    generate_t2,
    impulse_response,
    lag_matrix,
)
