"""Desk-scale learnable mixup: attention-generated masks, momentum training, baselines."""

from .errors import (
    AutomixError,
    ContractError,
    DatasetError,
    DimensionError,
    FormatError,
    LengthError,
    NumericError,
    ParameterError,
)
from .tensor import Tensor, backward, grad_check, no_grad, reset_tape, stop_gradient

__version__ = "0.1.0"
