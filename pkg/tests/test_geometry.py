"""
Tests for box conversions, overlap metrics, box losses and mask rasterization.
"""

import numpy as np
import pytest

from attbalance.errors import GeometryError
from attbalance.geometry import (
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
from attbalance.numerics import Tensor, grad_check


class TestBoxConversions:
    """Test center and corner box forms."""

    def test_to_corners(self):
        """Test center form to corner form."""
        c = to_corners(BoxSpec(0.5, 0.5, 0.4, 0.2))
        assert (c.x1, c.y1, c.x2, c.y2) == pytest.approx((0.3, 0.4, 0.7, 0.6))

    def test_from_corners(self):
        """Test corner form back to center form."""
        box = from_corners(CornerBox(0.1, 0.2, 0.5, 0.8))
        assert box.as_tuple() == pytest.approx((0.3, 0.5, 0.4, 0.6))

    def test_corners_are_clipped(self):
        """Test boxes extending past the image are clipped to the unit square."""
        c = to_corners(BoxSpec(0.9, 0.5, 0.4, 0.2))
        assert c.x2 == 1.0
        assert c.x1 == pytest.approx(0.7)

    def test_inverted_corners_raise(self):
        """Test a corner box with x2 < x1."""
        with pytest.raises(GeometryError):
            from_corners(CornerBox(0.6, 0.1, 0.4, 0.5))

    def test_negative_size_raises(self):
        """Test a center box with negative width."""
        with pytest.raises(GeometryError):
            BoxSpec(0.5, 0.5, -0.1, 0.2)


class TestOverlap:
    """Test IoU and generalized IoU."""

    def test_identical_boxes(self):
        """Test IoU and GIoU of a box with itself."""
        box = BoxSpec(0.4, 0.6, 0.3, 0.2)
        assert iou(box, box) == pytest.approx(1.0)
        assert giou(box, box) == pytest.approx(1.0)

    def test_partial_overlap(self):
        """Test IoU of two half-overlapping squares."""
        a = BoxSpec(0.25, 0.5, 0.5, 0.5)
        b = BoxSpec(0.5, 0.5, 0.5, 0.5)
        assert iou(a, b) == pytest.approx(1.0 / 3.0)
        assert giou(a, b) == pytest.approx(1.0 / 3.0 - (0.375 - 0.375) / 0.375)

    def test_disjoint_boxes(self):
        """Test disjoint boxes have zero IoU and negative GIoU."""
        a = CornerBox(0.0, 0.0, 0.2, 0.2)
        b = CornerBox(0.8, 0.8, 1.0, 1.0)
        assert iou(a, b) == 0.0
        assert giou(a, b) == pytest.approx(-0.92)

    def test_giou_bounds(self):
        """Test GIoU stays within [-1, 1] for random boxes."""
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = BoxSpec(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.5, 2))
            b = BoxSpec(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.5, 2))
            value = giou(a, b)
            assert -1.0 <= value <= 1.0
            assert value <= iou(a, b) + 1e-12


class TestBoxLosses:
    """Test the differentiable box-regression losses."""

    def test_giou_loss_matches_metric(self):
        """Test 1 - GIoU computed on the tape equals the float metric."""
        gt = BoxSpec(0.5, 0.5, 0.4, 0.4)
        pred = BoxSpec(0.47, 0.51, 0.3, 0.36)
        loss = giou_loss(Tensor(pred.as_array()), gt)
        assert loss.item() == pytest.approx(1.0 - giou(pred, gt))

    def test_giou_loss_perfect_prediction(self):
        """Test the loss vanishes for an exact prediction."""
        gt = BoxSpec(0.3, 0.6, 0.2, 0.4)
        assert giou_loss(Tensor(gt.as_array()), gt).item() == pytest.approx(0.0, abs=1e-12)

    def test_giou_loss_gradient(self):
        """Test the GIoU loss gradient against central differences."""
        gt = BoxSpec(0.5, 0.5, 0.4, 0.4)
        pred = Tensor([0.47, 0.51, 0.3, 0.36], requires_grad=True)
        report = grad_check(lambda: giou_loss(pred, gt), {"pred": pred})
        assert report.passed

    def test_giou_loss_rejects_bad_shape(self):
        """Test a prediction that is not a 4-vector."""
        with pytest.raises(GeometryError):
            giou_loss(Tensor([0.5, 0.5, 0.2]), BoxSpec(0.5, 0.5, 0.2, 0.2))

    def test_l1_loss_reductions(self):
        """Test mean and sum reductions of the L1 loss."""
        pred = Tensor([0.5, 0.5, 0.2, 0.2])
        gt = BoxSpec(0.4, 0.5, 0.2, 0.4)
        assert l1_loss(pred, gt).item() == pytest.approx(0.075)
        assert l1_loss(pred, gt, reduction="sum").item() == pytest.approx(0.3)

        with pytest.raises(ValueError):
            l1_loss(pred, gt, reduction="max")


class TestMasks:
    """Test mask rasterization and box ratios."""

    def test_rasterize_centered_box(self):
        """Test a centered half-size box covers the four middle cells of a 4x4 grid."""
        mask = rasterize_mask(BoxSpec(0.5, 0.5, 0.5, 0.5), (4, 4))
        assert mask.grid == (4, 4)
        assert mask.popcount() == 4
        assert mask.cells[1:3, 1:3].sum() == 4

    def test_tiny_box_marks_its_cell(self):
        """Test a box smaller than a cell still yields a non-empty mask."""
        mask = rasterize_mask(BoxSpec(0.1, 0.1, 0.04, 0.04), (4, 4))
        assert mask.popcount() == 1
        assert mask.cells[0, 0] == 1.0

    def test_complement(self):
        """Test the complement partitions the grid."""
        mask = rasterize_mask(BoxSpec(0.5, 0.5, 0.5, 0.5), (4, 4))
        assert mask.complement().popcount() == 12
        assert np.all(mask.flat + mask.complement().flat == 1.0)

    def test_invalid_mask_values(self):
        """Test masks must be binary 2-D grids."""
        with pytest.raises(GeometryError):
            SegMask(np.array([[0.0, 0.5]]))
        with pytest.raises(GeometryError):
            SegMask(np.array([1.0, 0.0]))

    def test_degenerate_box_raises(self):
        """Test rasterizing a zero-area box."""
        with pytest.raises(GeometryError):
            rasterize_mask(BoxSpec(0.5, 0.5, 0.0, 0.2), (4, 4))

    def test_box_ratio(self):
        """Test the covered share of the image, with clipping."""
        assert box_ratio(BoxSpec(0.5, 0.5, 0.5, 0.5)) == pytest.approx(0.25)
        assert box_ratio(BoxSpec(0.9, 0.5, 0.4, 0.2)) == pytest.approx(0.06)
