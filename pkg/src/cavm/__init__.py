"""Dose-increase autoregressive synthesis of contrast-enhanced images on phantom data."""

from .autodiff import AdamState, Tensor, adam_step, backward, grad_check
from .config import ModelConfig, paper_config, tiny_config, toy_config

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ModelConfig",
    "Tensor",
    "adam_step",
    "backward",
    "grad_check",
    "paper_config",
    "tiny_config",
    "toy_config",
]
