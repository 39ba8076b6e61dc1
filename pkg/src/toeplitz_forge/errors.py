"""Exception hierarchy shared across the package."""


class ForgeError(Exception):
    """Base class for all package errors."""


class FamilyFormatError(ForgeError):
    """Malformed family file; carries a 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class AdapterError(ForgeError):
    """Malformed adapter expression."""


class GridError(ForgeError):
    """A row or weight vector violates the factorial value grid."""


class FormatError(ForgeError):
    """Malformed or version-mismatched artifact file."""


class SearchSpaceError(ForgeError):
    """The declared search space cannot support the requested operation."""


class HorizonExhausted(SearchSpaceError):
    """Row horizon ran out before the construction could finish."""


class StabilizationError(SearchSpaceError):
    """Stage values failed to stabilize inside the declared scan window."""

    def __init__(self, message, window=()):
        super().__init__(message)
        self.window = tuple(window)
