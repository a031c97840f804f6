"""Exception types shared across the package."""


class FragnetError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidInputError(FragnetError, ValueError):
    """Arguments or configuration outside the accepted domain."""

    exit_code = 2


class ShapeError(FragnetError, ValueError):
    """Tensor shapes that do not fit the requested operation."""

    exit_code = 4


class DataError(FragnetError, OSError):
    """Unreadable, truncated or inconsistent data files."""

    exit_code = 3


class ConsistencyError(FragnetError, RuntimeError):
    """An internal invariant was violated (usually a geometry planning bug)."""

    exit_code = 4
