"""Exception types shared across the package."""


class BimarkError(Exception):
    """Base class for all package errors."""


class DimensionError(BimarkError, ValueError):
    """Operands disagree on vocabulary size, layer count, or length."""


class DomainError(BimarkError, ValueError):
    """An argument is outside its documented domain."""


class ParseError(BimarkError, ValueError):
    """A file or wire payload does not match its declared format."""


class ContractViolationError(BimarkError, RuntimeError):
    """A pluggable component (e.g. a distribution provider) broke its contract."""


class StatisticUndefinedError(BimarkError, ValueError):
    """A test statistic was requested with zero observations."""
