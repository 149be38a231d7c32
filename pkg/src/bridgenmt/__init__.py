"""Attention encoder-decoder translation lab with word-embedding bridging."""

from bridgenmt.model import ModelConfig, Variant, init_params
from bridgenmt.train import TrainConfig

__all__ = ["ModelConfig", "TrainConfig", "Variant", "init_params"]
__version__ = "0.1.0"
