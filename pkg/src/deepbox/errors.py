"""Exception types raised across the package."""


class DeepBoxError(Exception):
    """Base class for all package errors."""


class GeometryError(DeepBoxError, ValueError):
    """Invalid or degenerate box."""


class DimensionError(DeepBoxError, ValueError):
    """Array shapes do not fit together."""


class LabelError(DeepBoxError, ValueError):
    pass


class StateError(DeepBoxError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class ConfigError(DeepBoxError, ValueError):
    pass


class SamplingExhausted(DeepBoxError, RuntimeError):
    pass


class CompositionError(DeepBoxError, ValueError):
    pass


class DivergenceError(DeepBoxError, FloatingPointError):
    def __init__(self, iteration, loss):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


class DataError(DeepBoxError, ValueError):
    """Malformed or inconsistent input data."""
