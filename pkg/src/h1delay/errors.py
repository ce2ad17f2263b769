"""Exception hierarchy shared by all modules."""


class H1DelayError(Exception):
    """Base class for every error raised by this package."""


class NonIntegralGrid(H1DelayError, ValueError):
    pass


class DimensionMismatch(H1DelayError, ValueError):
    pass


class NonFiniteValue(H1DelayError, ValueError):
    pass


class OutOfDomain(H1DelayError, ValueError):
    pass


class MisalignedWindow(H1DelayError, ValueError):
    pass


class ZeroFunction(H1DelayError, ValueError):
    pass


class OutOfRange(H1DelayError, ValueError):
    pass


class EmptySetParameters(H1DelayError, ValueError):
    pass


class NonConvergence(H1DelayError, RuntimeError):
    pass


class NoCrossing(H1DelayError, RuntimeError):
    """The maturation trajectory never reached the lower threshold on [0, h]."""


class GBoundsViolated(H1DelayError, ValueError):
    """A rate function left its declared band [eps, K]."""


class MaxIterExceeded(H1DelayError, RuntimeError):
    pass


class ConfigError(H1DelayError, ValueError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
