"""Skipless CNNs with attention-routed gradient flow, on a small numpy autodiff engine."""

from .attention import EncoderConfig
from .errors import ContractError, DimensionError, FormatError, GradAttnError, NumericError, OracleError
from .models import ModelGraph, WidthConfig, build_gradattn, build_model, build_resnet18_lite, count_params
from .tensor import Tensor, backward, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DimensionError", "EncoderConfig", "FormatError", "GradAttnError", "ModelGraph",
    "NumericError", "OracleError", "Tensor", "WidthConfig", "backward", "build_gradattn", "build_model",
    "build_resnet18_lite", "count_params", "no_grad", "precision",
]
