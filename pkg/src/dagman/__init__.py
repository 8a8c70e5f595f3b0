"""Attention-guided masked image modeling with noisy-teacher co-distillation for 3D Swin encoders."""

__version__ = "0.1.0"

from .config import DistillConfig, EncoderConfig, MaskPolicy, PretrainConfig, load_config  # noqa: E402
from .errors import (  # noqa: E402
    CheckpointError,
    ConfigMismatchError,
    DagmanError,
    NumericalError,
    ValidationError,
    VolumeFormatError,
)

__all__ = [
    "CheckpointError",
    "ConfigMismatchError",
    "DagmanError",
    "DistillConfig",
    "EncoderConfig",
    "MaskPolicy",
    "NumericalError",
    "PretrainConfig",
    "ValidationError",
    "VolumeFormatError",
    "load_config",
]
