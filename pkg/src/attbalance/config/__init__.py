# Configuration module
from .run_config import (
    AttBalanceConfig,
    ConfigurationManager,
    DatasetConfig,
    ModelConfig,
    OptimizerConfig,
    RunConfig,
    apply_overrides,
    load_config,
)

__all__ = [
    "AttBalanceConfig",
    "ConfigurationManager",
    "DatasetConfig",
    "ModelConfig",
    "OptimizerConfig",
    "RunConfig",
    "apply_overrides",
    "load_config",
]
