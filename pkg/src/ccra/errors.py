"""Exception types raised across the package."""


class CcraError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CcraError, ValueError):
    pass


class EmptyInput(CcraError, ValueError):
    pass


class NonFiniteValue(CcraError, ValueError):
    pass


class EvenKernel(CcraError, ValueError):
    pass


class NonPositiveSigma(CcraError, ValueError):
    pass


class KernelTooLarge(CcraError, ValueError):
    pass


class NonScalarOutput(CcraError, ValueError):
    pass


class NonFiniteEvaluation(CcraError, ArithmeticError):
    pass


class NonFiniteLoss(CcraError, ArithmeticError):
    """Training diverged: the loss is NaN or infinite."""


class InconsistentLayerShapes(CcraError, ValueError):
    pass


class UnknownVariant(CcraError, ValueError):
    pass


class ConfigError(CcraError, ValueError):
    """Invalid configuration value or config file line."""


class StageError(CcraError):
    """Wraps an error raised inside a named forward stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
