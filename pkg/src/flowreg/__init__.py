"""Fit normalized densities to offline log-density evaluations.

The package fits a masked autoregressive flow, together with the target's
log normalizing constant, by robust regression on existing evaluations of an
unnormalized log density (typically collected from MAP optimization runs).
The headline API is :class:`NormalizingFlowRegressor`; the functional core,
benchmark targets, trace tooling, metrics and a Laplace baseline are exposed
alongside it.
"""

from .estimator import NormalizingFlowRegressor
from .exceptions import (
    ConfigurationError,
    DomainError,
    FlowRegressionError,
    LaplaceError,
    NumericError,
)
from .flow import (
    BaseDistribution,
    FlowConfig,
    FlowModel,
    FlowParameters,
    draw_prior_flow,
    estimate_base,
    initialize_flow,
    log_prior,
)
from .laplace import LaplaceResult, laplace_fit, laplace_from_traces, numerical_hessian
from .metrics import (
    MetricsReport,
    PsisResult,
    compute_report,
    delta_lml,
    export_corner_data,
    gskl,
    gskl_from_moments,
    hallucination_score,
    mmtv,
    psis_khat,
)
from .optimize import (
    FitOptions,
    FitResult,
    fit_flow_regression,
    lbfgs_maximize,
    optimize_constant_1d,
)
from .regression import (
    SIGMA2_MIN,
    EvalDataset,
    LikelihoodConfig,
    NoiseShapingConfig,
    RegressionObjective,
    compute_y_low,
    default_shaping,
    noise_shaping,
    observation_log_likelihood,
    temper_dataset,
)
from .spaces import (
    ParameterSpace,
    from_inference,
    log_abs_det_jacobian,
    to_inference,
    unbounded_space,
)
from .targets import (
    TargetDensity,
    get_target,
    ground_truth,
    make_gaussian,
    make_lumpy,
    make_mixture5,
    make_rosenbrock_gaussian,
    wrap_noisy,
)
from .traces import (
    TraceRecord,
    build_dataset,
    generate_training_set,
    load_dataset,
    read_trace,
    run_cma_es,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [
    "BaseDistribution",
    "ConfigurationError",
    "DomainError",
    "EvalDataset",
    "FitOptions",
    "FitResult",
    "FlowConfig",
    "FlowModel",
    "FlowParameters",
    "FlowRegressionError",
    "LaplaceError",
    "LaplaceResult",
    "LikelihoodConfig",
    "MetricsReport",
    "NoiseShapingConfig",
    "NormalizingFlowRegressor",
    "NumericError",
    "ParameterSpace",
    "PsisResult",
    "RegressionObjective",
    "SIGMA2_MIN",
    "TargetDensity",
    "TraceRecord",
    "build_dataset",
    "compute_report",
    "compute_y_low",
    "default_shaping",
    "delta_lml",
    "draw_prior_flow",
    "estimate_base",
    "export_corner_data",
    "fit_flow_regression",
    "from_inference",
    "generate_training_set",
    "get_target",
    "ground_truth",
    "gskl",
    "gskl_from_moments",
    "hallucination_score",
    "initialize_flow",
    "laplace_fit",
    "laplace_from_traces",
    "lbfgs_maximize",
    "load_dataset",
    "log_abs_det_jacobian",
    "log_prior",
    "make_gaussian",
    "make_lumpy",
    "make_mixture5",
    "make_rosenbrock_gaussian",
    "mmtv",
    "noise_shaping",
    "numerical_hessian",
    "observation_log_likelihood",
    "optimize_constant_1d",
    "psis_khat",
    "read_trace",
    "run_cma_es",
    "temper_dataset",
    "to_inference",
    "unbounded_space",
    "wrap_noisy",
    "write_trace",
]
