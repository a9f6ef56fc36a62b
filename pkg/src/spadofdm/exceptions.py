"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration.

    ``key`` names the offending setting when known, so front ends can report it.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NumericalInstabilityError(ArithmeticError):
    """A computation lost too much precision to be trusted.

    ``index`` is the offending count index for distribution computations.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class QuadratureError(NumericalInstabilityError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class SupportOverflowError(ValueError):
    """A count distribution would need more support than allowed."""

    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required
