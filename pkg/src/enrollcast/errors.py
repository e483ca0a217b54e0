"""Exception hierarchy shared across the package."""


class EnrollcastError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(EnrollcastError, ValueError):
    exit_code = 2


class DataError(EnrollcastError, ValueError):
    """Malformed input data: bad CSV rows, unparseable dates, dangling keys."""

    exit_code = 3


class SchemaMismatchError(DataError):
    """Model and feature matrix were built from different feature schemas."""


class NumericError(EnrollcastError, ArithmeticError):
    exit_code = 4
