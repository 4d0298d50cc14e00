"""Exception types shared across the package.

The CLI maps each class to its own exit code.
"""


class SpdReconError(Exception):
    """Base class for all package errors."""


class InputDomainError(SpdReconError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ConfigError(SpdReconError, ValueError):
    """A configuration document or parameter object is invalid."""


class FormatError(SpdReconError, ValueError):
    """A file on disk does not follow the expected layout."""


class NumericalError(SpdReconError, ArithmeticError):
    """A computation produced a non-finite intermediate."""
