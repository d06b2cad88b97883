"""Exception hierarchy shared by all stcausal modules.

Exit-code convention for the CLI: validation problems (bad inputs, bad
configuration, impossible requests) map to exit code 2, numerical failures
(singular matrices, degenerate estimation problems) to exit code 3.
"""


class StcausalError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class NumericalError(StcausalError):
    """Base class for numerical failures."""

    exit_code = 3


# Data / configuration validation

class DuplicateKeyError(StcausalError):
    pass


class UnknownColumnError(StcausalError):
    pass


class CoordinateBoundsError(StcausalError):
    pass


class NonUniformWeeksError(StcausalError):
    pass


class ExhaustedDatasetError(StcausalError):
    pass


class InvalidSplitError(StcausalError):
    pass


class InvalidFoldsError(StcausalError):
    pass


class SchemaMismatchError(StcausalError):
    pass


class TooFewRowsError(StcausalError):
    pass


class MissingInitialValuesError(StcausalError):
    pass


class UnsatisfiableError(StcausalError):
    pass


class UnstableSpecError(StcausalError):
    pass


class NotApplicableError(StcausalError):
    pass


class InvalidInterventionError(StcausalError):
    pass


class MismatchedScoresError(StcausalError):
    pass


# Numerical failures

class SingularKernelError(NumericalError):
    pass


class RankDeficientError(NumericalError):
    """Raised when a design matrix is rank deficient.

    ``columns`` names the offending (collinear) columns.
    """

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class DegenerateVariogramError(NumericalError):
    pass
