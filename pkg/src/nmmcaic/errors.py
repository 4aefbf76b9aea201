"""Exception hierarchy shared across the package."""


class CaicError(Exception):
    """Base class for all package errors."""


class SpecError(CaicError, ValueError):
    """Invalid model specification, parameter vector or dataset."""


class IndexRangeError(SpecError, IndexError):
    """A (year, age) index falls outside the model dimensions."""


class NonFiniteLikelihoodError(CaicError, FloatingPointError):
    """A log-likelihood term evaluated to a non-finite value.

    ``index`` is the position of the first offending observation.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TweedieSeriesError(CaicError, ArithmeticError):
    """The Tweedie series did not converge within the term budget."""

    def __init__(self, message, y=None, n_terms=None):
        super().__init__(message)
        self.y = y
        self.n_terms = n_terms


class InnerSolveError(CaicError, RuntimeError):
    """Newton iterations for the random effects failed to converge."""

    def __init__(self, message, gradient_norm=float("nan")):
        super().__init__(message)
        self.gradient_norm = gradient_norm


class FactorizationError(CaicError, ArithmeticError):
    """The negated random-effect Hessian is not positive definite."""


class SingularHessianError(CaicError, ArithmeticError):
    """The parameter Hessian of the marginal likelihood is (near) singular."""


class UnsupportedFamilyError(CaicError, ValueError):
    """The requested operation is not defined for this observation family."""


class BoundaryError(CaicError, ValueError):
    """A variance parameter sits on its boundary; the quantity is undefined."""


class SimulationError(CaicError, RuntimeError):
    """The Monte Carlo harness could not produce a result."""


class ConfigError(CaicError, ValueError):
    """Malformed experiment or model configuration file."""
