"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric failures exit 3.
"""


class SeedexError(Exception):
    """Base class for all package errors."""


class DataError(SeedexError):
    """Input data is missing, malformed, or inconsistent."""


class FormatError(DataError):
    """A file does not follow its on-disk format."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ReferentialIntegrityError(DataError):
    """An edge or answer references a node that does not exist."""


class ShapeError(ValueError, SeedexError):
    """Array dimensions do not line up."""


class ConfigError(SeedexError):
    """A configuration value is invalid or inconsistent."""


class NumericError(SeedexError):
    """Non-finite values or a solver that failed to converge."""
