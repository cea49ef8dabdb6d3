"""Exception and warning types raised across the package."""


class GcdError(Exception):
    """Base class for all package errors."""


class ZeroVector(GcdError, ValueError):
    pass


class NonPositiveTemperature(GcdError, ValueError):
    pass


class NotAProbabilityVector(GcdError, ValueError):
    pass


class NonFiniteEvaluation(GcdError, ArithmeticError):
    pass


class ShapeMismatch(GcdError, ValueError):
    pass


class CacheMismatch(GcdError, ValueError):
    pass


class InfeasibleSeparation(GcdError, RuntimeError):
    pass


class ParseError(GcdError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvariantViolation(GcdError, ValueError):
    pass


class KTooLarge(GcdError, ValueError):
    pass


class NoLabeledSamples(GcdError, ValueError):
    pass


class BatchTooSmall(GcdError, ValueError):
    pass


class NoCommonClasses(GcdError, ValueError):
    pass


class DatasetTooSmall(GcdError, ValueError):
    pass


class DivergenceDetected(GcdError, FloatingPointError):
    pass


class EmptyInput(GcdError, ValueError):
    pass


class LengthMismatch(GcdError, ValueError):
    pass


class ConfigError(GcdError, ValueError):
    pass


class IoError(GcdError, OSError):
    pass


class DegenerateSum(UserWarning):
    """A pseudo-class whose member embeddings cancel out; the class is masked."""
