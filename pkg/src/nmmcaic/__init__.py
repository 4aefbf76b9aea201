"""Conditional AIC for nonlinear mixed-effects models fitted by Laplace approximation."""

from .errors import (
    BoundaryError,
    CaicError,
    ConfigError,
    FactorizationError,
    IndexRangeError,
    InnerSolveError,
    NonFiniteLikelihoodError,
    SimulationError,
    SingularHessianError,
    SpecError,
    TweedieSeriesError,
    UnsupportedFamilyError,
)
from .model import (
    Dataset,
    Family,
    Link,
    ModelSpec,
    ParameterVector,
    RandomEffectVector,
    TrueProcess,
    cond_mean_cov,
    grad_log_joint,
    linear_predictor,
    log_cond_likelihood,
    log_joint,
    log_re_density,
    mean_from_linear_predictor,
)
from .tweedie import tweedie_log_density, tweedie_sample
from .estimation import (
    FitOptions,
    FitResult,
    fit,
    inner_maximize_psi,
    joint_hessian_psi,
    laplace_marginal,
)

__version__ = "0.1.0"
