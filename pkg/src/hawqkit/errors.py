"""Exception types. Each carries a short ``code`` used in CLI error JSON."""


class HawqError(Exception):
    code = "error"


class ShapeError(HawqError, ValueError):
    code = "shape_mismatch"


class NonFiniteError(HawqError, FloatingPointError):
    code = "non_finite"


class TapeError(HawqError, RuntimeError):
    code = "tape"


class FormatError(HawqError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    code = "format"

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CheckpointError(FormatError):
    code = "checkpoint"


class ConfigError(HawqError, ValueError):
    code = "config"


class BudgetError(HawqError, ValueError):
    code = "budget"


class ConvergenceError(HawqError, RuntimeError):
    code = "convergence"


class DivergenceError(HawqError, RuntimeError):
    code = "divergence"
