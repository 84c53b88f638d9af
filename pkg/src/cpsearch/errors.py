"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: UsageError -> 1, DataError (and its
subclasses) -> 2, NumericError -> 3.
"""


class ToolkitError(Exception):
    """Base class for all toolkit errors."""


class UsageError(ToolkitError):
    """Bad command line or bad API call arguments."""


class DataError(ToolkitError):
    """Invalid input data: schema violations, broken referential integrity."""


class FormatError(DataError):
    """Malformed binary or text file (bad magic, truncated payload, ...)."""


class NumericError(ToolkitError):
    """Numerical failure, e.g. a non-finite loss during training."""
