"""vigil: desk-scale spatiotemporal attention engine for driver-state video classification."""

from .errors import (
    ConfigError,
    DataFormatError,
    NumericalError,
    ShapeError,
    VigilError,
)
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataFormatError",
    "NumericalError",
    "ShapeError",
    "VigilError",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "__version__",
]
