"""Exception taxonomy shared across the package."""


class LseError(Exception):
    """Base class for all package-raised errors."""


class InputError(LseError, ValueError):
    """Rejected input data: wrong shape, non-finite values, empty signal."""


class ConfigError(LseError, ValueError):
    """Invalid or inconsistent configuration, including artifact fingerprint
    mismatches and unknown config keys."""


class DomainError(LseError, ValueError):
    """Argument outside its valid domain (e.g. a timestep out of range)."""


class NumericError(LseError, ArithmeticError):
    """Numeric breakdown at runtime, e.g. a NaN loss during training."""
