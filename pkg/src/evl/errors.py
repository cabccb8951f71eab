"""Exception hierarchy shared by all evl modules."""


class EVLError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EVLError, ValueError):
    pass


class RangeError(EVLError, IndexError):
    pass


class ParameterError(EVLError, ValueError):
    pass


class ContractError(EVLError, RuntimeError):
    pass


class NumericalError(EVLError, ArithmeticError):
    """Raised when a computation produces NaN/Inf (training abort, debug checks)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(EVLError, ValueError):
    pass


class CorruptionError(FormatError):
    pass


class ManifestError(EVLError, KeyError):
    def __init__(self, message, names=()):
        super().__init__(message)
        self.names = list(names)

    def __str__(self):
        return self.args[0]


class ConfigError(EVLError, ValueError):
    pass
