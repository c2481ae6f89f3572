"""Exception hierarchy shared by all edagcn modules."""


class EdagcnError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(EdagcnError, ValueError):
    """Input violates a documented precondition."""


class ParseError(ValidationError):
    """A data file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ShapeError(ValidationError):
    """Array or graph dimensions do not agree."""


class BoundsError(ValidationError, IndexError):
    """A node index is outside ``[0, N)``."""


class NumericError(EdagcnError, ArithmeticError):
    """Non-finite values appeared during a computation."""

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)
