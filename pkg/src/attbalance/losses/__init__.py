"""Attention regularization losses and difficulty-adaptive weighting."""

from .attbalance import (
    LossBreakdown,
    LossComponents,
    LossWeights,
    adw,
    assemble_total,
    attbalance_active,
    batch_rho,
    compute_components,
    compute_weights,
    mrc_layer_terms,
    mrc_loss,
    odw,
    rac_layer_terms,
    rac_loss,
    relative_rho,
    spearman,
    total_loss,
)

__all__ = [
    "LossBreakdown",
    "LossComponents",
    "LossWeights",
    "adw",
    "assemble_total",
    "attbalance_active",
    "batch_rho",
    "compute_components",
    "compute_weights",
    "mrc_layer_terms",
    "mrc_loss",
    "odw",
    "rac_layer_terms",
    "rac_loss",
    "relative_rho",
    "spearman",
    "total_loss",
]
