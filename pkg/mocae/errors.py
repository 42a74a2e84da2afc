"""Exception and warning types shared by every module."""


class MocaeError(Exception):
    """Base class for toolkit failures."""


class ParseError(MocaeError):
    """Malformed input file or record."""


class ConfigError(ParseError):
    """Invalid configuration: unknown keys, bad values, arity mismatch."""


class DomainError(MocaeError):
    """A value violates a documented invariant."""


class FitError(DomainError):
    """A calibrator could not be fitted."""


class CalibrationWarning(UserWarning):
    """Recoverable condition worth reporting (negative slope, empty metric, ...)."""
