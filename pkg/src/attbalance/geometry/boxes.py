"""
Box representations, overlap metrics, box-regression losses and mask rasterization.

Boxes are normalized to the unit image square. :class:`BoxSpec` is the
center form used for regression targets, :class:`CornerBox` the corner form
used for overlap arithmetic.
"""

import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from ..errors import GeometryError
from ..numerics import Tensor, abs_, clip, getitem, maximum, mean_all, minimum, relu, sum_all

logger = logging.getLogger(__name__)

L1_REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class CornerBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def clipped(self) -> "CornerBox":
        return CornerBox(
            min(max(self.x1, 0.0), 1.0),
            min(max(self.y1, 0.0), 1.0),
            min(max(self.x2, 0.0), 1.0),
            min(max(self.y2, 0.0), 1.0),
        )

    def contains(self, other: "CornerBox") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )


@dataclass(frozen=True)
class BoxSpec:
    """Normalized center-form box ``(cx, cy, w, h)``."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise GeometryError(f"box width/height must be non-negative, got {self}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "BoxSpec":
        cx, cy, w, h = (float(v) for v in values)
        return cls(cx, cy, w, h)

    def clipped(self) -> "BoxSpec":
        return from_corners(to_corners(self, clip=True), clip=False)


def to_corners(box: BoxSpec, clip: bool = True) -> CornerBox:
    corners = CornerBox(
        box.cx - box.w / 2, box.cy - box.h / 2, box.cx + box.w / 2, box.cy + box.h / 2
    )
    return corners.clipped() if clip else corners


def from_corners(corners: CornerBox, clip: bool = True) -> BoxSpec:
    if clip:
        corners = corners.clipped()
    if corners.x2 < corners.x1 or corners.y2 < corners.y1:
        raise GeometryError(f"corner box has x2 < x1 or y2 < y1: {corners}")
    return BoxSpec(
        (corners.x1 + corners.x2) / 2,
        (corners.y1 + corners.y2) / 2,
        corners.x2 - corners.x1,
        corners.y2 - corners.y1,
    )


AnyBox = Union[BoxSpec, CornerBox]


def _corners(box: AnyBox) -> CornerBox:
    # Corner boxes are taken literally; center boxes are clipped on conversion.
    return box if isinstance(box, CornerBox) else to_corners(box)


def _overlap(a: CornerBox, b: CornerBox) -> Tuple[float, float, float]:
    iw = max(min(a.x2, b.x2) - max(a.x1, b.x1), 0.0)
    ih = max(min(a.y2, b.y2) - max(a.y1, b.y1), 0.0)
    inter = iw * ih
    union = a.area + b.area - inter
    ew = max(a.x2, b.x2) - min(a.x1, b.x1)
    eh = max(a.y2, b.y2) - min(a.y1, b.y1)
    return inter, union, ew * eh


def iou(a: AnyBox, b: AnyBox) -> float:
    """Intersection over union; 0 when the union has no area."""
    inter, union, _ = _overlap(_corners(a), _corners(b))
    return inter / union if union > 0 else 0.0


def giou(a: AnyBox, b: AnyBox) -> float:
    """Generalized IoU: IoU minus the empty share of the enclosing box."""
    inter, union, enclosing = _overlap(_corners(a), _corners(b))
    if enclosing <= 0:
        return 0.0
    base = inter / union if union > 0 else 0.0
    return base - (enclosing - union) / enclosing


def _tensor_corners(pred: Tensor):
    cx, cy, w, h = (getitem(pred, i) for i in range(4))
    half_w, half_h = w * 0.5, h * 0.5
    x1 = clip(cx - half_w, 0.0, 1.0)
    y1 = clip(cy - half_h, 0.0, 1.0)
    x2 = clip(cx + half_w, 0.0, 1.0)
    y2 = clip(cy + half_h, 0.0, 1.0)
    return x1, y1, x2, y2


def giou_loss(pred: Tensor, gt: BoxSpec) -> Tensor:
    """``1 - GIoU`` between a predicted ``(cx, cy, w, h)`` tensor and the ground truth."""
    if pred.shape != (4,):
        raise GeometryError(f"predicted box must have shape (4,), got {pred.shape}")
    g = to_corners(gt)
    px1, py1, px2, py2 = _tensor_corners(pred)

    pred_area = relu(px2 - px1) * relu(py2 - py1)
    gt_area = g.area
    iw = relu(minimum(px2, g.x2) - maximum(px1, g.x1))
    ih = relu(minimum(py2, g.y2) - maximum(py1, g.y1))
    inter = iw * ih
    union = pred_area + gt_area - inter
    enclosing = (maximum(px2, g.x2) - minimum(px1, g.x1)) * (
        maximum(py2, g.y2) - minimum(py1, g.y1)
    )
    if enclosing.item() <= 0 or union.item() <= 0:
        logger.warning("Degenerate enclosing box in GIoU loss; returning constant loss 1")
        return Tensor(1.0)
    giou_value = inter / union - (enclosing - union) / enclosing
    return 1.0 - giou_value


def l1_loss(pred: Tensor, gt: BoxSpec, reduction: str = "mean") -> Tensor:
    """Absolute difference over the four normalized coordinates."""
    if reduction not in L1_REDUCTIONS:
        raise ValueError(f"Unknown L1 reduction: {reduction}. Must be one of: {L1_REDUCTIONS}")
    if pred.shape != (4,):
        raise GeometryError(f"predicted box must have shape (4,), got {pred.shape}")
    diff = abs_(pred - gt.clipped().as_array())
    return mean_all(diff) if reduction == "mean" else sum_all(diff)


@dataclass(frozen=True, eq=False)
class SegMask:
    """Binary mask on the visual-feature grid."""

    cells: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.cells)
        if values.ndim != 2 or not np.all((values == 0) | (values == 1)):
            raise GeometryError("mask must be a 2-D grid of 0/1 values")
        values = values.astype(np.float64)
        values.flags.writeable = False
        object.__setattr__(self, "cells", values)

    @property
    def grid(self) -> Tuple[int, int]:
        return self.cells.shape

    @property
    def flat(self) -> np.ndarray:
        return self.cells.reshape(-1)

    def complement(self) -> "SegMask":
        return SegMask(1.0 - self.cells)

    def popcount(self) -> int:
        return int(self.cells.sum())


def rasterize_mask(box: BoxSpec, grid: Tuple[int, int]) -> SegMask:
    """Mark grid cells whose centers lie inside the box.

    A box too small to contain any cell center still marks the cell holding
    its own center, so the mask is never empty.
    """
    rows, cols = grid
    if rows < 1 or cols < 1:
        raise GeometryError(f"grid must be at least 1x1, got {grid}")
    c = to_corners(box)
    if c.area <= 0:
        raise GeometryError(f"degenerate ground truth: {box}")

    ys = (np.arange(rows) + 0.5) / rows
    xs = (np.arange(cols) + 0.5) / cols
    inside_y = (ys >= c.y1) & (ys <= c.y2)
    inside_x = (xs >= c.x1) & (xs <= c.x2)
    cells = np.outer(inside_y, inside_x).astype(np.float64)
    if cells.sum() == 0:
        clipped = box.clipped()
        r = min(int(math.floor(clipped.cy * rows)), rows - 1)
        q = min(int(math.floor(clipped.cx * cols)), cols - 1)
        cells[r, q] = 1.0
        logger.debug(f"Box {box} covers no cell center; forced cell ({r}, {q})")
    return SegMask(cells)


def box_ratio(box: BoxSpec) -> float:
    """Share of the image covered by the clipped box."""
    clipped = box.clipped()
    ratio = clipped.w * clipped.h
    if ratio <= 0:
        raise GeometryError(f"box ratio needs a positive-area box, got {box}")
    return ratio
