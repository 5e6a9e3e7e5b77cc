"""Hybrid local-global vision transformer for single-image dehazing, on a
small numpy autodiff core."""

from .errors import DivergenceError, FormatError
from .network import ModelConfig, Outputs, build_network, forward
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "DivergenceError", "FormatError", "ModelConfig", "NonFiniteError", "Outputs",
    "ShapeError", "Tensor", "build_network", "forward", "no_grad",
]
