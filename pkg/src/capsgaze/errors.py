"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (see cli.py), so every error raised on
a user-facing path should be one of the classes below.
"""


class CapsGazeError(Exception):
    """Base class for all package errors."""


class ShapeError(CapsGazeError, ValueError):
    """Operands or parameters have incompatible shapes."""


class ConfigError(CapsGazeError, ValueError):
    """Invalid, unknown, or unparseable configuration."""


class FormatError(CapsGazeError, ValueError):
    """A binary or text artifact does not match its documented layout."""


class DataError(CapsGazeError, ValueError):
    """Dataset-level problem (layout, labels, files)."""


class MissingFileError(DataError):
    """A file referenced by a dataset manifest does not exist."""


class LabelParseError(DataError):
    """labels.csv is malformed or contains a non-numeric value."""


class LabelCountError(DataError):
    """Sequences on disk and label rows do not match one-to-one."""


class NumericError(CapsGazeError, RuntimeError):
    """Non-finite values where finite ones are required (e.g. NaN loss)."""


class ContractError(CapsGazeError, RuntimeError):
    """An API was used outside its documented contract."""
