"""Exception hierarchy shared by the library and the command line."""


class FvaError(Exception):
    """Base class for all fvalign errors."""


class ShapeError(FvaError, ValueError):
    """Operand shapes are incompatible with an operation."""


class DataError(FvaError, ValueError):
    """Input data (files, manifests, configs, datasets) is invalid."""


class NumericError(FvaError, ArithmeticError):
    """A computation produced an undefined or non-finite value."""
