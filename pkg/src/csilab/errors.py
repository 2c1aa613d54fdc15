"""Exception types shared across the package.

The CLI maps these onto exit codes: usage and bad argument values exit 1,
ConfigError / FormatError / CorruptionError exit 2, DivergenceError exit 3.
"""


class CsilabError(Exception):
    """Base class for package errors."""


class ConfigError(CsilabError):
    """Bad run configuration (unknown key, malformed value, missing path)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(CsilabError):
    """File does not follow the expected binary layout."""


class CorruptionError(FormatError):
    """File follows the layout but its payload fails integrity checks."""


class DivergenceError(CsilabError):
    """Training produced a non-finite loss or gradient."""
