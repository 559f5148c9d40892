"""Feedback vision transformer for continual learning (two-pass TAB/TSB model)."""
from .model import FCLViT, FCLViTConfig
from .tensor import Rng, Tensor, backward, no_grad

__all__ = ["FCLViT", "FCLViTConfig", "Rng", "Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
