"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericError -> 3.
"""


class VnsgError(Exception):
    """Base class for all package errors."""


class UsageError(VnsgError):
    """Bad arguments or configuration."""


class ShapeError(VnsgError):
    """Incompatible array shapes; message always names both shapes."""


class DataError(VnsgError):
    """Malformed or inconsistent input data."""


class NumericError(VnsgError):
    """Non-finite values or diverging computation."""
