"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration, shape, or contract violation."""


class NumericError(ArithmeticError):
    """Non-finite value produced during numeric evaluation."""


class GraphCycleError(ValueError):
    """Operation requiring a DAG received a cyclic graph."""


class GenerationError(RuntimeError):
    """Synthetic sampling produced an invalid value."""


class ParseError(ValueError):
    """Malformed dataset or sidecar file."""


class FitError(RuntimeError):
    """Fitting failed irrecoverably (carries diagnostics)."""
