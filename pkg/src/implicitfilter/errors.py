"""Exception hierarchy for implicitfilter."""


class ImplicitFilterError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(ImplicitFilterError):
    """A configuration value is missing, mistyped, or out of range."""


class InvalidInput(ImplicitFilterError, ValueError):
    """An argument is outside the domain of the operation."""


class DimensionMismatch(ImplicitFilterError, ValueError):
    """Array shapes do not agree with the model dimensions."""


class NonConvergence(ImplicitFilterError):
    """An iterative solver exhausted its iteration budget."""


class NotUShaped(ImplicitFilterError):
    """The objective is not monotone on one side of its minimum."""


class MinimizationFailure(ImplicitFilterError):
    """No interior minimum could be bracketed in the scan range."""


class SingularJacobian(ImplicitFilterError):
    """The map from reference variable to position is singular at the sample."""


class TailMass(ImplicitFilterError):
    """The quadrature grid truncates a non-negligible part of the density."""


class DegenerateIncrements(ImplicitFilterError):
    """The increment sums in the autocorrelation statistic vanish."""


class Divergence(ImplicitFilterError):
    """A stochastic-approximation iterate left its admissible range."""
