"""Exception hierarchy.

The CLI maps each family to an exit code: input problems exit 2, model
problems exit 3 and infeasible computations exit 4.
"""


class ClusterATEError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class InputError(ClusterATEError, ValueError):
    """Malformed or inconsistent input data or configuration."""

    exit_code = 2


class DesignError(InputError):
    """A randomization design that cannot be realized (e.g. zero treated clusters)."""


class ModelError(ClusterATEError):
    """The requested model cannot be fitted on the given data."""

    exit_code = 3


class EmptyArmError(ModelError):
    """A block has no treated or no control clusters under the assignment."""


class RankDeficiencyError(ModelError, ArithmeticError):
    """The weighted design matrix is not of full column rank."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class InfeasibleError(ClusterATEError):
    """A computation is not possible as requested (df <= 0, enumeration cap)."""

    exit_code = 4


class EnumerationCapError(InfeasibleError):
    def __init__(self, message, count):
        super().__init__(message)
        self.count = count
