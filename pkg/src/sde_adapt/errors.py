"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's preconditions."""


class ConfigurationError(ValueError):
    """A configuration is internally inconsistent (e.g. truncation radius
    outside the envelope's invertible range)."""


class EnvelopeDomainError(ValueError):
    """A value lies below the growth envelope's range, so it cannot be
    inverted."""


class NumericError(RuntimeError):
    """A numerical routine failed to converge or to bracket a root."""


class ImplicitSolveError(NumericError):
    """Newton and fixed-point iteration both failed on an implicit step.

    Carries the last residual norm seen before giving up.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual
