"""Exception types raised across the package."""


class MMCLError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MMCLError, ValueError):
    """Malformed numeric input: wrong shape, empty, or non-finite."""


class ConfigurationError(MMCLError, ValueError):
    """Inconsistent or out-of-range configuration."""


class OracleFailure(MMCLError, ArithmeticError):
    """The finite-difference oracle hit a non-finite loss value."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class NonFiniteLossError(MMCLError, ArithmeticError):
    """A training or optimization loss term became NaN/Inf or diverged."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class QueryFileError(MMCLError, ValueError):
    """Parse error in a query-matrix CSV file, with 1-based line/column."""

    def __init__(self, message, line, column):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column
