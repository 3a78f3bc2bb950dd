"""Virtual-node-augmented spatio-temporal graph convolutional networks
for long-horizon traffic forecasting."""

from .errors import DataError, NumericError, ShapeError, UsageError, VnsgError
from .tensor import GradCheckReport, Tensor, check_gradients

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "GradCheckReport",
    "check_gradients",
    "VnsgError",
    "UsageError",
    "ShapeError",
    "DataError",
    "NumericError",
    "__version__",
]
