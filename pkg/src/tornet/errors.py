"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1,
data and file-format problems exit 2, internal numerical failures exit 3.
"""


class TornetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TornetError, ValueError):
    """Invalid configuration, shape chain or argument combination."""


class DataError(TornetError):
    """Unusable input data (empty audio, malformed manifest, missing class)."""


class FormatError(DataError):
    """A file is not in the expected on-disk format."""


class CheckpointError(FormatError):
    """A checkpoint file failed validation while loading."""


class NumericalError(TornetError, ArithmeticError):
    """An operation produced NaN or Inf."""
