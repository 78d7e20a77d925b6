"""Synthetic referring-grounding data."""

from .dataset import Expression, GroundingDataset, GroundingSample, SceneObject
from .synthetic import (
    augment_crop,
    crop_to_window,
    expression_words,
    generate,
    generate_sample,
    match,
)
from .vocabulary import Vocabulary

__all__ = [
    "Expression",
    "GroundingDataset",
    "GroundingSample",
    "SceneObject",
    "Vocabulary",
    "augment_crop",
    "crop_to_window",
    "expression_words",
    "generate",
    "generate_sample",
    "match",
]
