"""Hybrid CNN-transformer skin lesion classifier on a small numpy autodiff core."""

from .config import CLASS_NAMES, ModelConfig, RunConfig
from .errors import (CheckpointFormatError, ConfigError, DimensionError, GradCheckFailure, HsictError,
                     TrainingAbort, TruncatedCheckpointError)
from .model import HsictModel
from .tensor import Param, Tensor

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "ModelConfig", "RunConfig", "HsictModel", "Param", "Tensor",
    "HsictError", "ConfigError", "DimensionError", "CheckpointFormatError", "TruncatedCheckpointError",
    "TrainingAbort", "GradCheckFailure",
]
