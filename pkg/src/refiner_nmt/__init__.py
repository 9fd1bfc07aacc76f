"""Attention-based translation with per-step source refinement, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig
from .model import RefinerNMT

__all__ = ["ModelConfig", "RefinerNMT", "TrainConfig", "__version__"]
