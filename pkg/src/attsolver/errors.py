"""Exception hierarchy shared across the package."""


class AttSolverError(Exception):
    """Base class for all package errors."""


class ContractViolation(AttSolverError, ValueError):
    """An argument broke a documented precondition (shape, sign, ...)."""


class ConfigurationError(AttSolverError, ValueError):
    """Inconsistent or missing configuration."""


class SingularStateError(AttSolverError, ArithmeticError):
    """The state lies on a singularity of the right-hand side."""


class SingularMatrixError(AttSolverError, ArithmeticError):
    """A linear system could not be solved because the matrix is singular."""


class ActivationSingularityError(AttSolverError, ArithmeticError):
    """A rational activation hit a (near) root of its denominator."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FileFormatError(AttSolverError):
    """Base class for binary file parse failures."""


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass
