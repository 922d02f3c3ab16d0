"""Exception hierarchy shared by all modules.

Everything a caller can reasonably recover from is a ``DomainError``; the
CLI maps those to exit code 1 and anything else to exit code 2.
"""


class DomainError(Exception):
    """Base class for user-facing validation and data errors."""


class DimensionError(DomainError, ValueError):
    pass


class ParameterError(DomainError, ValueError):
    pass


class NonFiniteError(DomainError, ValueError):
    pass


class UsageError(DomainError, RuntimeError):
    pass


class OracleError(DomainError, RuntimeError):
    pass


class GeometryError(DomainError, ValueError):
    pass


class DataError(DomainError, ValueError):
    pass


class TrainingError(DomainError, RuntimeError):
    pass


class ConfigError(DomainError, ValueError):
    pass
