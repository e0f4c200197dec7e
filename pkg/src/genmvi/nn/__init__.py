"""From-scratch numpy CNN used to generate myelin-volume-index maps."""
from .augment import INPUT_CHANNELS, add_gaussian_noise, robust_range
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .loss import AUX_WEIGHT, loss, loss_and_grads, rmse
from .network import (LayerSpec, NetworkSpec, Normalization, backward, forward, init_params,
                      param_views, two_block_spec)
from .optim import LrSchedule, NonFiniteGradient, TrainState, adam_step, lr_multiplier

__all__ = [
    "AUX_WEIGHT", "CheckpointError", "INPUT_CHANNELS", "LayerSpec", "LrSchedule", "NetworkSpec",
    "NonFiniteGradient", "Normalization", "TrainState", "adam_step", "add_gaussian_noise", "backward",
    "forward", "init_params", "load_checkpoint", "loss", "loss_and_grads", "lr_multiplier",
    "param_views", "rmse", "robust_range", "save_checkpoint", "two_block_spec",
]
