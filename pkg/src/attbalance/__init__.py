"""
AttBalance - attention-balanced training of a miniature visual grounding transformer.

This package provides a small reverse-mode autodiff engine, a fusion
transformer that grounds referring expressions on synthetic grid scenes, the
AttBalance attention regularizer with its momentum model, and tools to train,
evaluate and compare runs.
"""

__version__ = "1.0.0"
__author__ = "AttBalance Toolkit Team"

from .config.run_config import ConfigurationManager, RunConfig, load_config
from .data import GroundingDataset, generate
from .losses import total_loss
from .model import forward, init_params, load_checkpoint, save_checkpoint
from .trainer import AttBalanceTrainer, compare, evaluate, grad_check_cmd

__all__ = [
    "AttBalanceTrainer",
    "ConfigurationManager",
    "GroundingDataset",
    "RunConfig",
    "compare",
    "evaluate",
    "forward",
    "generate",
    "grad_check_cmd",
    "init_params",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
    "total_loss",
]
