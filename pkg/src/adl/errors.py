"""Exception types shared across the package."""


class AdlError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(AdlError):
    """Operand shapes are incompatible; message names both shapes."""


class NumericError(AdlError):
    """Non-finite or otherwise invalid numeric input."""


class ConfigError(AdlError):
    """Invalid or inconsistent configuration."""


class GraphError(AdlError):
    """Backward pass requested for a tensor the tape never produced."""


class OptimizerError(AdlError):
    """Optimizer state does not match the parameter set."""


class InputError(AdlError):
    """Invalid runtime input (bad label, empty dataset, missing file)."""


class EvaluationError(AdlError):
    """Evaluation request that cannot be satisfied."""


class FormatError(AdlError):
    """File does not match the expected binary layout."""


class CorruptionError(AdlError):
    """File is truncated or fails an internal consistency check."""
