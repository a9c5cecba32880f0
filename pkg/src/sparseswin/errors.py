"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates a structural constraint."""


class GraphError(RuntimeError):
    """Misuse of the autograd graph (non-scalar loss, reused graph, ...)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class DataError(IOError):
    """Dataset file is missing, truncated, or malformed."""


class CheckpointError(IOError):
    """Checkpoint file has a bad header, version, or body."""
