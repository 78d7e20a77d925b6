"""
Exponential-moving-average shadow of the grounding model.

The shadow is a gradient-free copy of the live parameters, updated once per
optimizer step after the parameter update::

    shadow <- m * shadow + (1 - m) * params
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ..data.dataset import GroundingSample
from ..errors import ConfigMismatchError, DimensionError
from ..numerics import no_grad
from .grounding_model import AttentionStack, forward
from .params import ModelParams

logger = logging.getLogger(__name__)


@dataclass
class MomentumState:
    shadow: ModelParams
    m: float
    step_count: int = 0

    @classmethod
    def init(cls, params: ModelParams, m: float = 0.9) -> "MomentumState":
        """Start the shadow as an exact, gradient-free copy of ``params``."""
        _check_momentum(m)
        if not params.all_finite():
            raise ValueError("cannot initialize the momentum model from non-finite parameters")
        return cls(shadow=params.copy(requires_grad=False), m=m, step_count=0)

    def update(self, params: ModelParams, m: Optional[float] = None) -> None:
        m = self.m if m is None else m
        _check_momentum(m)
        if params.names() != self.shadow.names():
            raise ConfigMismatchError("momentum shadow and live parameters have different names")
        for name, live in params.items():
            shadow = self.shadow[name]
            if shadow.shape != live.shape:
                raise DimensionError(f"{name}: shadow {shadow.shape} vs live {live.shape}")
            shadow.assign(m * shadow.data + (1.0 - m) * live.data)
        self.step_count += 1

    def gap(self, params: ModelParams) -> float:
        """Euclidean distance between shadow and live parameters."""
        total = 0.0
        for name, live in params.items():
            total += float(np.sum((self.shadow[name].data - live.data) ** 2))
        return float(np.sqrt(total))

    def forward(self, sample: GroundingSample, capture_layers: Iterable[int]) -> AttentionStack:
        return momentum_forward(self, sample, capture_layers)


def _check_momentum(m: float) -> None:
    if not 0.0 < m < 1.0:
        raise ValueError(f"momentum must be in (0, 1), got {m}")


def init(params: ModelParams, m: float = 0.9) -> MomentumState:
    return MomentumState.init(params, m)


def update(state: MomentumState, params: ModelParams, m: Optional[float] = None) -> None:
    state.update(params, m)


def momentum_forward(
    state: MomentumState, sample: GroundingSample, capture_layers: Iterable[int]
) -> AttentionStack:
    """Captured maps of the shadow model; nothing is recorded on the tape."""
    with no_grad():
        _, attn = forward(state.shadow, sample, capture_layers)
    return attn.detached()
