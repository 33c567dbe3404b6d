"""Training machinery: parameterized layers with analytic reverse-mode
gradients, the Adam optimizer, config and checkpoint formats, and the
desk-scale toy tasks."""

from .optim import Adam, decayed_learning_rate
from .config import TrainConfig, load_config
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Adam",
    "decayed_learning_rate",
    "TrainConfig",
    "load_config",
    "load_checkpoint",
    "save_checkpoint",
]
