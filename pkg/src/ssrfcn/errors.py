"""Exception hierarchy shared by every ssrfcn module."""


class SsrFcnError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SsrFcnError, ValueError):
    """Shapes or hyperparameters that do not fit together."""


class DegenerateBatchError(SsrFcnError, ValueError):
    pass


class UsageError(SsrFcnError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class TrainingDivergenceError(SsrFcnError, FloatingPointError):
    pass


class InputSizeError(SsrFcnError, ValueError):
    pass


class FormatError(SsrFcnError, ValueError):
    """A weight file that cannot be read back into a model."""

    def __init__(self, message, tensor=None):
        if tensor is not None:
            message = f"{tensor}: {message}"
        super().__init__(message)
        self.tensor = tensor


class BoundsError(SsrFcnError, IndexError):
    pass


class UndefinedMetricError(SsrFcnError, ValueError):
    """A rate whose denominator is empty (e.g. no spoof samples)."""


class ParseError(SsrFcnError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ProtocolError(SsrFcnError, ValueError):
    pass


class DataInputError(SsrFcnError, ValueError):
    """An image that cannot be decoded or has the wrong geometry."""
