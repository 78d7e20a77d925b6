"""
Parameter sets of the fusion transformer and their deterministic initialization.
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from ..config.run_config import ModelConfig
from ..errors import ConfigMismatchError, DimensionError
from ..numerics import Tensor

logger = logging.getLogger(__name__)

INIT_STREAM = 1

# Parameters that are initialized to constants rather than drawn at random.
_ONES = ("norm1.gain", "norm2.gain", "final_norm.gain")
_ZEROS = ("norm1.bias", "norm2.bias", "final_norm.bias", "head.fc3.bias")


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Name -> shape of every parameter, in a fixed order."""
    c, hidden = config.d_model, config.mlp_hidden
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["embed.token"] = (config.vocab_size, c)
    shapes["embed.text_pos"] = (config.max_text_len, c)
    shapes["embed.visual_proj.weight"] = (config.feature_dim, c)
    shapes["embed.visual_proj.bias"] = (c,)
    shapes["embed.visual_pos"] = (config.n_visual, c)
    shapes["embed.object_query"] = (1, c)
    for i in range(config.n_layers):
        prefix = f"layers.{i}"
        shapes[f"{prefix}.norm1.gain"] = (c,)
        shapes[f"{prefix}.norm1.bias"] = (c,)
        for proj in ("q", "k", "v", "out"):
            shapes[f"{prefix}.attn.{proj}.weight"] = (c, c)
            shapes[f"{prefix}.attn.{proj}.bias"] = (c,)
        shapes[f"{prefix}.norm2.gain"] = (c,)
        shapes[f"{prefix}.norm2.bias"] = (c,)
        shapes[f"{prefix}.ffn.fc1.weight"] = (c, hidden)
        shapes[f"{prefix}.ffn.fc1.bias"] = (hidden,)
        shapes[f"{prefix}.ffn.fc2.weight"] = (hidden, c)
        shapes[f"{prefix}.ffn.fc2.bias"] = (c,)
    shapes["final_norm.gain"] = (c,)
    shapes["final_norm.bias"] = (c,)
    shapes["head.fc1.weight"] = (c, c)
    shapes["head.fc1.bias"] = (c,)
    shapes["head.fc2.weight"] = (c, c)
    shapes["head.fc2.bias"] = (c,)
    shapes["head.fc3.weight"] = (c, 4)
    shapes["head.fc3.bias"] = (4,)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...], config: ModelConfig) -> int:
    if name.endswith(".weight"):
        return shape[0]
    if name.endswith(".bias"):
        # A bias shares its layer's fan-in; every layer here maps from d_model
        # except the visual projection and the second feed-forward map.
        if name == "embed.visual_proj.bias":
            return config.feature_dim
        if name.endswith("ffn.fc2.bias"):
            return config.mlp_hidden
        return config.d_model
    return config.d_model


class ModelParams:
    """Named tensors of one model, bound to the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, Tensor]):
        expected = parameter_shapes(config)
        if list(tensors.keys()) != list(expected.keys()):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            raise ConfigMismatchError(
                f"parameter names do not match the config (missing={sorted(missing)}, "
                f"unexpected={sorted(extra)})"
            )
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DimensionError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors.keys())

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self._tensors.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, t in self._tensors.items():
            if name not in arrays:
                raise ConfigMismatchError(f"missing parameter {name}")
            t.assign(arrays[name])

    def copy(self, requires_grad: Optional[bool] = None) -> "ModelParams":
        """Deep copy; the copy shares no arrays or gradients with the original."""
        tensors = OrderedDict(
            (
                name,
                Tensor(
                    t.numpy(),
                    requires_grad=t.requires_grad if requires_grad is None else requires_grad,
                    name=name,
                ),
            )
            for name, t in self._tensors.items()
        )
        return ModelParams(self.config, tensors)

    def all_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(t.data))) for t in self._tensors.values())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws; constant norms and head bias.

    The regression head's last bias is zero, so the initial box sits at the
    image center after the sigmoid.
    """
    errors = config.validate()
    if config.vocab_size is None or config.feature_dim is None:
        errors.append("vocab_size and feature_dim must be set before initializing parameters")
    if errors:
        raise ValueError("Invalid model configuration: " + "; ".join(errors))

    rng = np.random.default_rng([seed, INIT_STREAM])
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(_ONES):
            values = np.ones(shape)
        elif name.endswith(_ZEROS):
            values = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape, config))
            values = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    params = ModelParams(config, tensors)
    logger.debug(f"Initialized {params.num_parameters()} parameters (seed {seed})")
    return params
