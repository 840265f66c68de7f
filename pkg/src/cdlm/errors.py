"""Exception hierarchy shared by every cdlm module."""


class CDLMError(Exception):
    """Base class for all structured errors raised by this package."""


class DimensionError(CDLMError, ValueError):
    pass


class ConfigurationError(CDLMError, ValueError):
    pass


class DomainError(CDLMError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class UsageError(CDLMError, ValueError):
    pass


class StateError(CDLMError, RuntimeError):
    pass


class NonFiniteError(CDLMError, FloatingPointError):
    """Raised as soon as a forward op produces NaN or Inf."""

    def __init__(self, op: str, report=None):
        super().__init__(f"non-finite value produced by {op}")
        self.op = op
        self.report = report


class FormatError(CDLMError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.path = path
        self.offset = offset
