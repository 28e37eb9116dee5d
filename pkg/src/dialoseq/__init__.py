"""dialoseq: grounded-dialogue seq2seq training and evaluation at desk scale."""

from .errors import ConfigError, DataError, DialoseqError, NumericError, ShapeError, TapeError
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DialoseqError",
    "NumericError",
    "ShapeError",
    "TapeError",
    "KERNEL_BACKEND",
    "__version__",
]
