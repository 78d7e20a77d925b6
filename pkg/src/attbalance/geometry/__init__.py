"""Box geometry, overlap metrics, box losses and mask rasterization."""

from .boxes import (
    BoxSpec,
    CornerBox,
    SegMask,
    box_ratio,
    from_corners,
    giou,
    giou_loss,
    iou,
    l1_loss,
    rasterize_mask,
    to_corners,
)

__all__ = [
    "BoxSpec",
    "CornerBox",
    "SegMask",
    "box_ratio",
    "from_corners",
    "giou",
    "giou_loss",
    "iou",
    "l1_loss",
    "rasterize_mask",
    "to_corners",
]
