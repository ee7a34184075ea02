"""
Exceptions raised by se2net.

Everything the package raises on purpose derives from :class:`Se2NetError`,
so callers can catch the whole family at once. The command line maps
configuration and data errors to exit code ``1`` and everything else to exit
code ``2``.
"""


class Se2NetError(Exception):
    """Base class for every error raised deliberately by se2net."""

class ConfigurationError(Se2NetError, ValueError):
    """A shape, layer sequence, flag or parameter is invalid."""

class DataError(Se2NetError, ValueError):
    """A dataset, manifest, label or tensor file is malformed."""

class NumericalError(Se2NetError, ArithmeticError):
    """A non-finite value showed up where finite values are required."""

class DivergenceError(NumericalError):
    """
    Training produced a non-finite loss. The model has already been restored
    to its last good weights; the history up to the failure is attached as
    ``history``.
    """
    def __init__(self, message, history=None):
        super(DivergenceError, self).__init__(message)
        self.history = history or []
