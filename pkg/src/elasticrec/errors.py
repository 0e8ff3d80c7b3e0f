"""Exception hierarchy shared by every module."""


class ElasticError(Exception):
    """Base class for all errors raised by elasticrec."""


class DimensionError(ElasticError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ElasticError, ValueError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(ElasticError, ArithmeticError):
    """An operation produced NaN or Inf."""


class ConfigError(ElasticError, ValueError):
    """Invalid or inconsistent configuration value."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataError(ElasticError, ValueError):
    """Dataset content is unusable (empty, unknown ids, vocabulary mismatch)."""


class FormatError(DataError):
    """Input file could not be parsed."""

    def __init__(self, message, samples=()):
        super().__init__(message)
        self.samples = list(samples)
