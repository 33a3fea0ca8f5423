"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A value is NaN or otherwise non-finite where that is not allowed."""


class ContractError(RuntimeError):
    """A caller broke an operation's precondition."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class SamplingError(RuntimeError):
    """An index plan could not be sampled."""


class DataError(ValueError):
    """Base class for ingestion problems."""


class RaggedRowError(DataError):
    pass


class NonNumericCellError(DataError):
    pass


class TooFewRowsError(DataError):
    pass


class TrainingAbort(RuntimeError):
    """Training stopped on a non-finite loss or gradient."""
