class DualGraphError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(DualGraphError, ValueError):
    """Input file could not be parsed."""

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


class DomainError(DualGraphError, ValueError):
    """Input is well-formed but violates a domain precondition."""


class NonFiniteError(DualGraphError, FloatingPointError):
    """A NaN or Inf appeared during a numeric computation."""


class ConfigError(DualGraphError, ValueError):
    """Bad configuration key or value."""
