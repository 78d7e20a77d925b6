"""
Checkpoints: model config, run config, step counters and every tensor a run
needs to resume exactly.

Stored in the versioned container of :mod:`attbalance.serialization`.
``ModelConfig`` fields go into the metadata block one key each
(``model.<field>``). Tensor names are prefixed ``params.``, ``momentum.``
and ``optim.`` for the live model, the moving-average shadow and optimizer
state respectively.
"""

import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from ..config.run_config import ModelConfig, RunConfig
from ..errors import CheckpointError, ConfigMismatchError
from ..numerics import Tensor
from ..serialization import decode_container, encode_container
from .momentum import MomentumState
from .params import ModelParams, parameter_shapes

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ATTBCKPT"
CHECKPOINT_FORMAT = "attbalance-checkpoint"

PARAMS_PREFIX = "params."
MOMENTUM_PREFIX = "momentum."
OPTIM_PREFIX = "optim."


@dataclass
class Checkpoint:
    params: ModelParams
    step: int = 0
    run_config: Optional[RunConfig] = None
    momentum: Optional[MomentumState] = None
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    dataset_fingerprint: str = ""
    extra: Dict[str, str] = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return self.params.config


def _model_metadata(config: ModelConfig) -> Dict[str, str]:
    return {f"model.{k}": json.dumps(v) for k, v in asdict(config).items()}


def _model_config_from(metadata: Dict[str, str], source: str) -> ModelConfig:
    values = {}
    for f in fields(ModelConfig):
        key = f"model.{f.name}"
        if key not in metadata:
            raise CheckpointError(f"{source}: missing model config key {key}")
        values[f.name] = json.loads(metadata[key])
    return ModelConfig(**values)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "step": str(checkpoint.step),
        "dataset_fingerprint": checkpoint.dataset_fingerprint,
    }
    metadata.update(_model_metadata(checkpoint.model_config))
    if checkpoint.run_config is not None:
        metadata["run_config"] = checkpoint.run_config.canonical_json()
    for key, value in checkpoint.extra.items():
        metadata[f"extra.{key}"] = value

    tensors = {PARAMS_PREFIX + k: v for k, v in checkpoint.params.arrays().items()}
    if checkpoint.momentum is not None:
        metadata["momentum.m"] = repr(float(checkpoint.momentum.m))
        metadata["momentum.step_count"] = str(checkpoint.momentum.step_count)
        tensors.update(
            {MOMENTUM_PREFIX + k: v for k, v in checkpoint.momentum.shadow.arrays().items()}
        )
    tensors.update({OPTIM_PREFIX + k: v for k, v in checkpoint.optimizer_state.items()})
    return encode_container(CHECKPOINT_MAGIC, metadata, tensors)


def _param_set(
    config: ModelConfig, arrays: Dict[str, np.ndarray], prefix: str, requires_grad: bool, source: str
) -> ModelParams:
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        key = prefix + name
        if key not in arrays:
            raise ConfigMismatchError(f"{source}: tensor {key} missing for this model config")
        if arrays[key].shape != shape:
            raise ConfigMismatchError(
                f"{source}: tensor {key} has shape {arrays[key].shape}, config implies {shape}"
            )
        tensors[name] = Tensor(arrays[key], requires_grad=requires_grad, name=name)
    return ModelParams(config, tensors)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    container = decode_container(blob, CHECKPOINT_MAGIC, source)
    meta = container.metadata
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{source}: not an attbalance checkpoint")
    config = _model_config_from(meta, source)
    params = _param_set(config, container.tensors, PARAMS_PREFIX, True, source)

    momentum = None
    if "momentum.m" in meta:
        shadow = _param_set(config, container.tensors, MOMENTUM_PREFIX, False, source)
        momentum = MomentumState(
            shadow=shadow, m=float(meta["momentum.m"]), step_count=int(meta["momentum.step_count"])
        )

    run_config = None
    if "run_config" in meta:
        run_config = RunConfig.from_dict(json.loads(meta["run_config"]))
        if asdict(run_config.model) != asdict(config):
            raise ConfigMismatchError(f"{source}: embedded run config disagrees with model config")

    optimizer_state = {
        k[len(OPTIM_PREFIX):]: v for k, v in container.tensors.items() if k.startswith(OPTIM_PREFIX)
    }
    extra = {k[len("extra."):]: v for k, v in meta.items() if k.startswith("extra.")}
    return Checkpoint(
        params=params,
        step=int(meta["step"]),
        run_config=run_config,
        momentum=momentum,
        optimizer_state=optimizer_state,
        dataset_fingerprint=meta.get("dataset_fingerprint", ""),
        extra=extra,
    )


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(checkpoint)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    logger.info(f"Checkpoint at step {checkpoint.step} written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint file not found: {path}")
    checkpoint = decode_checkpoint(path.read_bytes(), source=str(path))
    logger.info(f"Loaded checkpoint {path} (step {checkpoint.step})")
    return checkpoint
