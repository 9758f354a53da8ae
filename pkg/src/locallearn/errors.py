"""Exception types raised by this package.

Everything derives from LocalLearnError so callers can catch the whole family,
and from ValueError so sloppy call sites that only guard ValueError still work.
"""


class LocalLearnError(ValueError):
    """Base class for all errors raised by locallearn."""


class ShapeError(LocalLearnError):
    """An array argument has the wrong rank, extent, or dtype family."""


class ConfigError(LocalLearnError):
    """A hyperparameter or configuration value is out of its legal range."""


class InputError(LocalLearnError):
    """Runtime data handed to an operation violates its contract (e.g. a
    label row that is not one-hot)."""


class DataError(LocalLearnError):
    """A dataset or checkpoint file is missing, truncated, or malformed."""


class NonFiniteError(LocalLearnError):
    """A loss or gradient stopped being finite; training must abort loudly."""
