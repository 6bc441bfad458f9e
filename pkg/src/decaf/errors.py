"""Exception hierarchy shared by the package."""


class DecafError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ParseError(DecafError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class NumericalError(DecafError, FloatingPointError):
    """Raised when a gradient or parameter becomes non-finite."""


class ModelFormatError(DecafError, ValueError):
    """Corrupt, truncated or incompatible model container."""
