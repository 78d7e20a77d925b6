"""
Configuration management for AttBalance experiments.

A :class:`RunConfig` nests the model, loss, dataset and optimizer settings
and round-trips through YAML or JSON. :class:`ConfigurationManager` holds the
named templates used by the command line.
"""

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

logger = logging.getLogger(__name__)

CAPTURE_STATES = ("normed", "raw")
RHO_MODES = ("batch-spearman", "disabled")
L1_REDUCTIONS = ("mean", "sum")
RUN_MODES = ("attbalance", "baseline")
OPTIMIZERS = ("sgd", "adam")
DATASET_FORMATS = ("jsonl", "binary")

# Token layout shared with attbalance.data.vocabulary: pad and "the",
# shape words, color words, two size words, then "left", "right", "of".
N_SPECIAL_TOKENS = 2
N_SIZE_CLASSES = 2
N_RELATION_TOKENS = 3


@dataclass
class ModelConfig:
    """Shape of the miniature fusion transformer."""

    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 6
    grid_h: int = 8
    grid_w: int = 8
    max_text_len: int = 10
    vocab_size: Optional[int] = None  # filled from the dataset when None
    feature_dim: Optional[int] = None  # filled from the dataset when None
    mlp_hidden: int = 64
    capture_state: str = "normed"

    @property
    def n_visual(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def seq_len(self) -> int:
        return 1 + self.max_text_len + self.n_visual

    def last_k_layers(self, k: int) -> List[int]:
        """Indices of the final ``k`` encoder layers."""
        if not 1 <= k <= self.n_layers:
            raise ValueError(f"k must be in [1, {self.n_layers}], got {k}")
        return list(range(self.n_layers - k, self.n_layers))

    def validate(self) -> List[str]:
        errors = []
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            errors.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.n_layers < 1:
            errors.append("n_layers must be >= 1")
        if self.grid_h < 1 or self.grid_w < 1:
            errors.append("visual grid must be at least 1x1")
        if self.max_text_len < 1:
            errors.append("max_text_len must be >= 1")
        if self.vocab_size is not None and self.vocab_size < 1:
            errors.append("vocab_size must be >= 1")
        if self.feature_dim is not None and self.feature_dim < 1:
            errors.append("feature_dim must be >= 1")
        if self.capture_state not in CAPTURE_STATES:
            errors.append(
                f"Invalid capture_state: {self.capture_state}. Must be one of: {list(CAPTURE_STATES)}"
            )
        return errors


@dataclass
class AttBalanceConfig:
    """Loss weights, schedule and component switches of the attention regularizer."""

    alpha_ar: float = 1.0
    alpha_1: float = 1.0
    alpha_g: float = 1.0
    applied_layers: List[int] = field(default_factory=lambda: [2, 3, 4, 5])
    attbalance_epochs: int = 12
    momentum: float = 0.9
    rho_mode: str = "batch-spearman"
    eps_log: float = 1e-12
    use_rac: bool = True
    use_mrc: bool = True
    use_adw: bool = True
    use_odw: bool = True
    l1_reduction: str = "mean"

    def validate(self, n_layers: Optional[int] = None, enabled: bool = True) -> List[str]:
        errors = []
        if not 0.0 < self.momentum < 1.0:
            errors.append(f"momentum must lie in (0, 1), got {self.momentum}")
        if enabled and not self.applied_layers:
            errors.append("applied_layers must be non-empty when AttBalance is enabled")
        if list(self.applied_layers) != sorted(set(self.applied_layers)):
            errors.append("applied_layers must be strictly increasing")
        if n_layers is not None and any(not 0 <= i < n_layers for i in self.applied_layers):
            errors.append(f"applied_layers {self.applied_layers} outside [0, {n_layers})")
        if self.rho_mode not in RHO_MODES:
            errors.append(f"Invalid rho_mode: {self.rho_mode}. Must be one of: {list(RHO_MODES)}")
        if self.l1_reduction not in L1_REDUCTIONS:
            errors.append(
                f"Invalid l1_reduction: {self.l1_reduction}. Must be one of: {list(L1_REDUCTIONS)}"
            )
        if self.eps_log <= 0:
            errors.append("eps_log must be positive")
        if self.attbalance_epochs < 0:
            errors.append("attbalance_epochs must be >= 0")
        return errors


@dataclass
class DatasetConfig:
    """Synthetic referring-grounding scenes."""

    n_train: int = 256
    n_val: int = 128
    grid_h: int = 8
    grid_w: int = 8
    min_objects: int = 3
    max_objects: int = 5
    n_shapes: int = 4
    n_colors: int = 4
    min_side: int = 1
    max_side: int = 4
    share_attribute_prob: float = 0.5
    relation_prob: float = 0.3
    box_ratio_min: float = 0.015
    box_ratio_max: float = 0.25
    noise_std: float = 0.1
    max_text_len: int = 10
    seed: int = 0
    crop_augment: bool = True
    crop_min_scale: float = 0.6
    file_format: str = "jsonl"

    @property
    def vocab_size(self) -> int:
        return N_SPECIAL_TOKENS + self.n_shapes + self.n_colors + N_SIZE_CLASSES + N_RELATION_TOKENS

    @property
    def feature_dim(self) -> int:
        # One-hot shape, color and size blocks plus an objectness channel.
        return self.n_shapes + self.n_colors + N_SIZE_CLASSES + 1

    def validate(self) -> List[str]:
        errors = []
        if self.n_train < 0 or self.n_val < 0:
            errors.append("n_train and n_val must be >= 0")
        if self.grid_h < 1 or self.grid_w < 1:
            errors.append("grid must be at least 1x1")
        if not 1 <= self.min_objects <= self.max_objects:
            errors.append("object count range must satisfy 1 <= min_objects <= max_objects")
        if self.max_objects > self.grid_h * self.grid_w:
            errors.append(
                f"max_objects ({self.max_objects}) exceeds the {self.grid_h}x{self.grid_w} grid"
            )
        if not 1 <= self.min_side <= self.max_side:
            errors.append("side range must satisfy 1 <= min_side <= max_side")
        if self.max_side > min(self.grid_h, self.grid_w):
            errors.append("max_side exceeds the grid")
        if self.n_shapes < 1 or self.n_colors < 1:
            errors.append("n_shapes and n_colors must be >= 1")
        if not 0.0 < self.box_ratio_min <= self.box_ratio_max <= 1.0:
            errors.append("box ratio range must satisfy 0 < min <= max <= 1")
        for name in ("share_attribute_prob", "relation_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name} must lie in [0, 1]")
        if self.noise_std < 0:
            errors.append("noise_std must be >= 0")
        if not 0.0 < self.crop_min_scale <= 1.0:
            errors.append("crop_min_scale must lie in (0, 1]")
        if self.file_format not in DATASET_FORMATS:
            errors.append(
                f"Invalid file_format: {self.file_format}. Must be one of: {list(DATASET_FORMATS)}"
            )
        return errors


@dataclass
class OptimizerConfig:
    name: str = "sgd"
    learning_rate: float = 0.05
    epochs: int = 16
    batch_size: int = 16
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> List[str]:
        errors = []
        if self.name not in OPTIMIZERS:
            errors.append(f"Invalid optimizer: {self.name}. Must be one of: {list(OPTIMIZERS)}")
        if self.learning_rate <= 0:
            errors.append("learning_rate must be positive")
        if self.epochs < 0:
            errors.append("epochs must be >= 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.grad_clip <= 0:
            errors.append("grad_clip must be positive")
        return errors


_SECTIONS = {
    "model": ModelConfig,
    "attbalance": AttBalanceConfig,
    "dataset": DatasetConfig,
    "optimizer": OptimizerConfig,
}


@dataclass
class RunConfig:
    """Everything needed to reproduce one training run."""

    run_name: str = "reference"
    mode: str = "attbalance"
    seed: int = 0
    output_dir: str = "runs/reference"
    eval_every_epochs: int = 4
    checkpoint_every_steps: int = 0
    grad_check_entries: Optional[int] = 24
    model: ModelConfig = field(default_factory=ModelConfig)
    attbalance: AttBalanceConfig = field(default_factory=AttBalanceConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        """Fill model sizes that follow from the dataset."""
        for name, cls in _SECTIONS.items():
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))
        if self.model.vocab_size is None:
            self.model.vocab_size = self.dataset.vocab_size
        if self.model.feature_dim is None:
            self.model.feature_dim = self.dataset.feature_dim

    @property
    def attbalance_enabled(self) -> bool:
        return self.mode == "attbalance"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = copy.deepcopy(data)
        for name, section in _SECTIONS.items():
            if name in data and isinstance(data[name], dict):
                data[name] = section(**data[name])
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_yaml(cls, yaml_path: Union[str, Path]) -> "RunConfig":
        """Load configuration from a YAML file."""
        with open(yaml_path, "r") as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data)

    @classmethod
    def from_json(cls, json_path: Union[str, Path]) -> "RunConfig":
        """Load configuration from a JSON file."""
        with open(json_path, "r") as f:
            data = json.load(f)
        return cls.from_dict(data)

    def to_yaml(self, yaml_path: Union[str, Path]) -> None:
        with open(yaml_path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, default_flow_style=False, indent=2, sort_keys=False)

    def to_json(self, json_path: Union[str, Path]) -> None:
        with open(json_path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def canonical_json(self) -> str:
        """Key-sorted compact JSON, stable across runs."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def validate(self) -> bool:
        """Validate the configuration, logging every problem found."""
        errors = []
        if self.mode not in RUN_MODES:
            errors.append(f"Invalid mode: {self.mode}. Must be one of: {list(RUN_MODES)}")
        errors.extend(self.model.validate())
        errors.extend(
            self.attbalance.validate(self.model.n_layers, enabled=self.attbalance_enabled)
        )
        errors.extend(self.dataset.validate())
        errors.extend(self.optimizer.validate())

        if (self.model.grid_h, self.model.grid_w) != (self.dataset.grid_h, self.dataset.grid_w):
            errors.append("model and dataset grids differ")
        if self.model.vocab_size != self.dataset.vocab_size:
            errors.append(
                f"model vocab_size ({self.model.vocab_size}) != dataset vocabulary "
                f"({self.dataset.vocab_size})"
            )
        if self.model.feature_dim != self.dataset.feature_dim:
            errors.append(
                f"model feature_dim ({self.model.feature_dim}) != dataset features "
                f"({self.dataset.feature_dim})"
            )
        if self.model.max_text_len < self.dataset.max_text_len:
            errors.append("model max_text_len is shorter than the dataset's expressions")

        if self.attbalance_enabled and 0 in self.attbalance.applied_layers:
            logger.warning(
                "AttBalance applied to layer 0: its visual tokens have not yet seen the text"
            )

        if errors:
            for error in errors:
                logger.error(f"Configuration error: {error}")
            return False
        return True


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Return a copy of ``config`` with dotted-key overrides applied.

    ``{"attbalance.momentum": 0.99, "mode": "baseline"}`` sets a nested and a
    top-level field; nested dicts (``{"attbalance": {...}}``) work as well.
    """
    flat: Dict[str, Any] = {}
    for key, value in overrides.items():
        if isinstance(value, dict) and key in _SECTIONS:
            for sub_key, sub_value in value.items():
                flat[f"{key}.{sub_key}"] = sub_value
        else:
            flat[key] = value

    data = config.to_dict()
    for key, value in flat.items():
        _set_dotted(data, key, value)
    # Sizes derived from the dataset follow it unless set explicitly.
    if any(k.startswith("dataset.") for k in flat):
        for derived in ("vocab_size", "feature_dim"):
            if f"model.{derived}" not in flat:
                data["model"][derived] = None
    return RunConfig.from_dict(data)


def _set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    target = data
    for part in parts[:-1]:
        if part not in target or not isinstance(target[part], dict):
            raise ValueError(f"Unknown configuration section: {key}")
        target = target[part]
    if parts[-1] not in target:
        raise ValueError(f"Unknown configuration key: {key}")
    target[parts[-1]] = value


class ConfigurationManager:
    """Named configuration templates for common experiment variants."""

    TEMPLATES: Dict[str, Dict[str, Any]] = {
        "reference": {
            "run_name": "reference",
            "output_dir": "runs/reference",
        },
        "baseline": {
            "run_name": "baseline",
            "mode": "baseline",
            "output_dir": "runs/baseline",
        },
        "tiny": {
            "run_name": "tiny",
            "output_dir": "runs/tiny",
            "model": {"d_model": 8, "n_heads": 2, "n_layers": 2, "grid_h": 3, "grid_w": 3,
                      "max_text_len": 6, "mlp_hidden": 12},
            "attbalance": {"applied_layers": [0, 1], "attbalance_epochs": 2},
            "dataset": {"n_train": 8, "n_val": 4, "grid_h": 3, "grid_w": 3,
                        "min_objects": 2, "max_objects": 2, "n_shapes": 2, "n_colors": 2,
                        "min_side": 1, "max_side": 2, "relation_prob": 0.0,
                        "box_ratio_min": 0.1, "box_ratio_max": 0.5, "max_text_len": 6},
            "optimizer": {"epochs": 2, "batch_size": 2},
        },
        "rac_only": {
            "run_name": "rac_only",
            "output_dir": "runs/rac_only",
            "attbalance": {"use_mrc": False, "use_adw": False, "use_odw": False},
        },
        "mrc_only": {
            "run_name": "mrc_only",
            "output_dir": "runs/mrc_only",
            "attbalance": {"use_rac": False, "use_adw": False, "use_odw": False},
        },
        "no_rho": {
            "run_name": "no_rho",
            "output_dir": "runs/no_rho",
            "attbalance": {"rho_mode": "disabled"},
        },
        "no_dat": {
            "run_name": "no_dat",
            "output_dir": "runs/no_dat",
            "attbalance": {"use_adw": False, "use_odw": False},
        },
    }

    @classmethod
    def create_config_from_template(
        cls, template_name: str, overrides: Optional[Dict[str, Any]] = None
    ) -> RunConfig:
        """Create a configuration from a predefined template."""
        if template_name not in cls.TEMPLATES:
            raise ValueError(
                f"Unknown template: {template_name}. Available: {list(cls.TEMPLATES.keys())}"
            )
        config = apply_overrides(RunConfig(), copy.deepcopy(cls.TEMPLATES[template_name]))
        if overrides:
            config = apply_overrides(config, overrides)
        return config

    @classmethod
    def list_templates(cls) -> List[str]:
        return list(cls.TEMPLATES.keys())

    @classmethod
    def get_template_info(cls, template_name: str) -> Dict[str, Any]:
        if template_name not in cls.TEMPLATES:
            raise ValueError(f"Unknown template: {template_name}")
        return copy.deepcopy(cls.TEMPLATES[template_name])


def load_config(config_path: Union[str, Path]) -> RunConfig:
    """Load configuration from file, supporting both YAML and JSON."""
    config_path = Path(config_path)

    if not config_path.exists():
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    if config_path.suffix.lower() in [".yaml", ".yml"]:
        return RunConfig.from_yaml(config_path)
    elif config_path.suffix.lower() == ".json":
        return RunConfig.from_json(config_path)
    else:
        raise ValueError(f"Unsupported configuration file format: {config_path.suffix}")
