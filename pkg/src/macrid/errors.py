"""Exception hierarchy shared across the package.

CLI exit codes map onto these: usage errors -> 1, DataError -> 2,
NumericError -> 3.
"""


class MacridError(Exception):
    """Base class for all package errors."""


class DataError(MacridError):
    """Problems with input data or on-disk artifacts."""


class ParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyCorpusError(DataError):
    pass


class InvalidSplitError(DataError):
    pass


class InsufficientItemsError(DataError):
    """Fewer eligible items than requested subranges; carries the count."""

    def __init__(self, eligible: int, needed: int):
        super().__init__(f"{eligible} eligible items, need at least {needed}")
        self.eligible = eligible
        self.needed = needed


class NumericError(MacridError):
    """Non-finite values or failed numeric preconditions."""


class DimensionError(NumericError):
    """Inconsistent tensor shapes."""
