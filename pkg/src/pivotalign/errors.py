"""Exception types shared across the library."""


class PivotAlignError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PivotAlignError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(PivotAlignError, ValueError):
    """A value lies outside the mathematical domain of the operation."""


class ContractError(PivotAlignError, ValueError):
    """A documented precondition was violated."""


class LengthError(ContractError):
    """A sequence exceeds the configured maximum length."""


class VocabularyError(PivotAlignError, ValueError):
    """A token id falls outside the vocabulary."""


class ConfigError(PivotAlignError, ValueError):
    """A configuration file or value cannot be used."""


class CheckpointError(PivotAlignError, ValueError):
    """A checkpoint file is malformed or incompatible."""


class DataError(PivotAlignError, ValueError):
    """A corpus is malformed or fails its audit."""


class NonFiniteGradientError(PivotAlignError, FloatingPointError):
    """An optimizer step saw a NaN or infinite gradient and was aborted."""
