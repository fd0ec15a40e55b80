"""Exception types shared across the package.

Everything raised on purpose derives from one of these, so callers (and the
command line driver) can tell configuration mistakes from bad data from
numerical blow-ups without string matching.
"""


class ShapeError(ValueError):
    """An array had the wrong shape or an incompatible dimension."""


class ConfigError(ValueError):
    """A configuration value is out of range, unknown, or inconsistent."""


class DataError(RuntimeError):
    """An input file or dataset is malformed."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values where finite ones are required."""


class CheckpointError(DataError):
    """A checkpoint file is truncated, corrupt, or from an unknown version."""
