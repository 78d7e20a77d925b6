"""Fusion transformer, its momentum shadow and checkpoints."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .grounding_model import AttentionStack, forward, forward_batch, head_averaged_similarity
from .momentum import MomentumState, momentum_forward
from .params import ModelParams, init_params, parameter_shapes

__all__ = [
    "AttentionStack",
    "Checkpoint",
    "ModelParams",
    "MomentumState",
    "forward",
    "forward_batch",
    "head_averaged_similarity",
    "init_params",
    "load_checkpoint",
    "momentum_forward",
    "parameter_shapes",
    "save_checkpoint",
]
