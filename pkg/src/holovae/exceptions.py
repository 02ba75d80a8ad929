"""Exception hierarchy shared across the package.

The CLI maps each family to a distinct exit code (see ``holovae.cli``).
"""


class HoloError(Exception):
    """Base class for all package errors."""


class ParseError(HoloError):
    """Malformed input file or record."""


class ValidationError(HoloError, ValueError):
    """Inputs violate a documented precondition."""


class ShapeError(ValidationError):
    """Signatures or array shapes do not match."""


class SelectionRuleError(ValidationError):
    """Degree triple violates the triangle inequality."""


class ConfigError(ValidationError):
    """Model or transform configuration is invalid or incomplete."""


class DomainError(ValidationError):
    """Argument outside the function domain (e.g. radius > 1)."""


class AliasingError(ValidationError):
    """Requested degree cannot be resolved at the given bandwidth."""


class ModeError(ValidationError):
    """Operation unavailable for this model mode (e.g. sampling an AE)."""


class NumericError(HoloError, ArithmeticError):
    """Degenerate or non-finite numerics."""


class DegenerateFrameError(NumericError):
    """Frame vectors are (near) zero or collinear."""
