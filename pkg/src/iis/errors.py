"""Exception hierarchy.

Each family maps onto one CLI exit code: usage errors exit 1, data errors
exit 2, numeric errors exit 3.
"""


class IISError(Exception):
    exit_code = 1
    code = "error"


class UsageError(IISError, ValueError):
    exit_code = 1
    code = "usage"


class DataError(IISError, ValueError):
    exit_code = 2
    code = "data"


class FormatError(DataError):
    code = "format"


class BadMagicError(FormatError):
    code = "bad_magic"


class TruncatedFileError(FormatError):
    code = "truncated"


class DimensionOverflowError(FormatError):
    code = "dimension_overflow"


class UnsupportedVersionError(FormatError):
    code = "unsupported_version"


class ZeroSamplesError(FormatError):
    code = "zero_samples"


class ValidationError(DataError):
    """A loaded or constructed object violates one of its invariants."""

    code = "invalid"


class NumericError(IISError, ArithmeticError):
    exit_code = 3
    code = "numeric"


class SingularSystemError(NumericError):
    code = "singular"


class DivergenceError(NumericError):
    code = "diverged"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
