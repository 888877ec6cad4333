"""Sparse spectral mixture-of-experts ship detection on synthetic SAR, in pure numpy."""

from .config import ModelConfig, TrainConfig

__version__ = "0.1.0"
__all__ = ["ModelConfig", "TrainConfig", "__version__"]
