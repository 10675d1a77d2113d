"""WaveFormer: learnable wavelet front-end + rotary-attention transformer for sEMG windows."""

from .errors import (CheckpointError, ConfigError, ContractError, DimensionError,
                     DivergenceError, InputError, NonFiniteError, ParameterError, ParseError,
                     ShapeMismatchError, WaveFormerError)
from .model import AblationConfig, ModelConfig, WaveFormer, count_parameters, param_count
from .tensor import RngStreams, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "AblationConfig", "ModelConfig", "WaveFormer", "Tensor", "RngStreams", "backward",
    "no_grad", "count_parameters", "param_count", "WaveFormerError", "DimensionError",
    "ParameterError", "ConfigError", "ContractError", "InputError", "ParseError",
    "NonFiniteError", "DivergenceError", "CheckpointError", "ShapeMismatchError",
]
