"""Exception types shared across the package."""


class CalibBenchError(Exception):
    """Base class for all package errors."""


class DimensionError(CalibBenchError, ValueError):
    pass


class DegenerateRowError(CalibBenchError, ValueError):
    pass


class ParameterError(CalibBenchError, ValueError):
    pass


class LabelError(CalibBenchError, ValueError):
    pass


class PreconditionError(CalibBenchError, ValueError):
    pass


class EvaluationError(CalibBenchError, ArithmeticError):
    pass


class EmptyInputError(CalibBenchError, ValueError):
    pass


class DataError(CalibBenchError, ValueError):
    pass


class ParseError(CalibBenchError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(CalibBenchError, ArithmeticError):
    """Non-finite loss encountered during training."""

    def __init__(self, step, components):
        self.step = step
        self.components = dict(components)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at step {step} ({detail})")
