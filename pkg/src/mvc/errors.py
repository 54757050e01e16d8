"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's shape rule."""


class DataError(ValueError):
    """A dataset, image, manifest or checkpoint could not be used."""


class CheckpointError(DataError):
    """A checkpoint file is corrupt, truncated, or of an unknown version."""


class NumericError(ArithmeticError):
    """A non-finite loss or gradient was produced."""
