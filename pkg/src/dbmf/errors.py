"""Exception hierarchy shared across the package.

Exit codes (used by the CLI): 2 validation, 3 numerical, 4 I/O.
"""


class DbmfError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(DbmfError):
    """Invalid input: bad arguments, inconsistent shapes, contract violations."""

    exit_code = 2


class TripletParseError(ValidationError):
    """A data file line failed to parse; carries the offending line number."""

    def __init__(self, path, line_number, message):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = path
        self.line_number = line_number


class NumericalError(DbmfError):
    """Numerical failure (e.g. a Cholesky factorization that cannot be repaired)."""

    exit_code = 3


class ArtifactError(DbmfError):
    """I/O failure on run artifacts: missing, truncated or unwritable files."""

    exit_code = 4


class PipelineError(ArtifactError):
    """A pipeline stage could not obtain its inputs; names the stage and block."""
