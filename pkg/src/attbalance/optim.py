"""
Parameter updates with global-norm gradient clipping.

Optimizer state is a flat ``name -> array`` mapping so it can be stored in
checkpoint containers next to the parameters.
"""

import logging
import math
from typing import Dict, Mapping

import numpy as np

from .config.run_config import OptimizerConfig
from .errors import CheckpointError, NumericalError
from .model.params import ModelParams

logger = logging.getLogger(__name__)


def collect_grads(params: ModelParams) -> Dict[str, np.ndarray]:
    """Current gradients; parameters the loss never reached get zeros."""
    return {
        name: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
        for name, t in params.items()
    }


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericalError(f"non-finite gradient norm ({norm})", component="gradients")
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    logger.debug(f"Clipping gradients: norm {norm:.4f} -> {max_norm}")
    return {name: g * factor for name, g in grads.items()}


class GradientDescent:
    """Plain gradient descent with a fixed learning rate."""

    name = "sgd"

    def __init__(self, config: OptimizerConfig):
        self.config = config

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> None:
        lr = self.config.learning_rate
        for name, t in params.items():
            t.assign(t.data - lr * grads[name])

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if state:
            raise CheckpointError(f"gradient descent has no state, got {sorted(state)}")


class Adam:
    """Adam with bias correction; moments are part of the checkpoint."""

    name = "adam"

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> None:
        cfg = self.config
        self.t += 1
        for name, t in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros(t.shape))
            v = self.v.get(name, np.zeros(t.shape))
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - cfg.beta1 ** self.t)
            v_hat = v / (1.0 - cfg.beta2 ** self.t)
            t.assign(t.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"adam.t": np.array(float(self.t))}
        state.update({f"adam.m.{k}": v for k, v in self.m.items()})
        state.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        if state and "adam.t" not in state:
            raise CheckpointError("Adam state is missing its step counter")
        self.t = int(state["adam.t"]) if state else 0
        self.m = {k[len("adam.m."):]: np.array(v) for k, v in state.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: np.array(v) for k, v in state.items() if k.startswith("adam.v.")}


def build_optimizer(config: OptimizerConfig):
    if config.name == "sgd":
        return GradientDescent(config)
    if config.name == "adam":
        return Adam(config)
    raise ValueError(f"Unknown optimizer: {config.name}")
