"""Learned inter-agent communication on the matrix label-counting game.

A small reverse-mode autodiff engine drives a parameter-shared CommNet-style
policy with either a mean or an attention message encoder, trained by
REINFORCE with entropy regularization.
"""

from .analysis import analyze, fit_parametric, pairwise_means, separability
from .env import EnvConfig
from .model import ModelConfig, forward_joint, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, final_window_score, train

__version__ = "0.1.0"

__all__ = [
    "EnvConfig",
    "ModelConfig",
    "TrainConfig",
    "analyze",
    "final_window_score",
    "fit_parametric",
    "forward_joint",
    "init_params",
    "load_checkpoint",
    "pairwise_means",
    "save_checkpoint",
    "separability",
    "train",
]
