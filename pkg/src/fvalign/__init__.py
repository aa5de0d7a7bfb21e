"""Face-to-voice embedding alignment: speech encoder, face encoder and priors."""

from .errors import DataError, FvaError, NumericError, ShapeError

__all__ = ["DataError", "FvaError", "NumericError", "ShapeError"]
__version__ = "0.1.0"
