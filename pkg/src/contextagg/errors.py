"""Exception hierarchy shared by every module."""


class ContextAggError(Exception):
    pass


class ShapeError(ContextAggError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(ContextAggError, ValueError):
    """A configuration value violates a documented constraint."""


class NumericError(ContextAggError, ArithmeticError):
    """NaN or otherwise unusable numbers reached an operation."""


class ContractError(ContextAggError, RuntimeError):
    """An API was called outside its precondition (e.g. backward on a non-scalar)."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""


class CheckpointError(ContextAggError, IOError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass
