"""Exception hierarchy shared by every module of the package."""


class MetaBINError(Exception):
    """Base class for all package errors."""


class ShapeError(MetaBINError, ValueError):
    """Operands have incompatible shapes."""


class NumericError(MetaBINError, ArithmeticError):
    """An operation produced NaN or Inf."""


class ContractError(MetaBINError, RuntimeError):
    """A caller violated an API precondition."""


class DegenerateStatisticsError(MetaBINError, ValueError):
    """Normalization statistics are undefined for the given input."""


class EmptyBatchError(DegenerateStatisticsError):
    pass


class BatchCompositionError(MetaBINError, ValueError):
    """A loss cannot be evaluated because the batch lacks positives or negatives."""


class ConfigError(MetaBINError, ValueError):
    pass


class SamplingError(MetaBINError, ValueError):
    pass


class FormatError(MetaBINError, ValueError):
    """A persisted file is truncated, corrupt, or of an unknown version."""


class EvaluationError(MetaBINError, ValueError):
    pass


class TrainingError(MetaBINError, RuntimeError):
    """Training aborted; ``checkpoint`` points at the last good state when one was written."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
