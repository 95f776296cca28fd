"""Desk-scale lab for entropy-scaled (MiLe), focal and cross-entropy LM losses."""

from .losses import LossSpec, batch_loss, ce_loss, entropy, focal_loss, loss_grad, mile_loss
from .model import Model, ModelConfig, count_params, preset

__all__ = [
    "LossSpec",
    "Model",
    "ModelConfig",
    "batch_loss",
    "ce_loss",
    "count_params",
    "entropy",
    "focal_loss",
    "loss_grad",
    "mile_loss",
    "preset",
]
__version__ = "0.1.0"
