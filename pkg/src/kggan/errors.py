"""Exception hierarchy shared across the package."""


class KGGANError(Exception):
    """Base class for all package errors."""


class DimensionError(KGGANError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(KGGANError, ValueError):
    """A precondition of an operation was violated."""


class SpecError(KGGANError, ValueError):
    """An invalid dataset spec or run configuration."""


class NumericError(KGGANError, ArithmeticError):
    """NaN/Inf values or a failed numerical routine."""


class MissingArtifactError(KGGANError, FileNotFoundError):
    """A required file or directory does not exist."""
