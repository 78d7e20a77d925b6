"""
Tests for attention/IoU statistics and report generation.
"""

import csv
import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from attbalance.analysis import (
    EvalRecord,
    accuracy,
    attention_grids,
    attention_histogram,
    box_ratio_curve,
    build_report,
    collect,
    export_csv,
    layer_rho_profile,
)
from attbalance.config import ConfigurationManager
from attbalance.data import generate
from attbalance.errors import DatasetError
from attbalance.losses import spearman
from attbalance.model import init_params


def _record(i, in_mask, iou, ratio=0.1, layers=(3,)):
    sums = in_mask if isinstance(in_mask, (list, tuple)) else [in_mask]
    return EvalRecord(
        sample_id=f"val-{i:05d}",
        layers=list(layers),
        in_mask_sums=list(sums),
        iou=iou,
        box_ratio=ratio,
        pred_box=(0.5, 0.5, 0.2, 0.2),
        gt_box=(0.5, 0.5, 0.2, 0.2),
    )


class TestEvalRecord:
    """Test record validation."""

    def test_out_of_range_values(self):
        """Test IoU, attention mass and box ratio bounds."""
        with pytest.raises(ValueError):
            _record(0, 0.5, 1.5)
        with pytest.raises(ValueError):
            _record(0, 1.2, 0.5)
        with pytest.raises(ValueError):
            _record(0, 0.5, 0.5, ratio=0.0)

    def test_layer_lookup(self):
        """Test in-mask lookup by layer."""
        record = _record(0, [0.2, 0.6], 0.5, layers=(1, 4))
        assert record.in_mask(4) == 0.6
        with pytest.raises(KeyError):
            record.in_mask(2)


class TestHistogram:
    """Test the equal-count attention histogram."""

    def test_remainder_goes_to_lowest_bins(self):
        """Test 17 retained samples split into 3 + 7 x 2."""
        values = np.linspace(0.15, 0.85, 17)
        records = [_record(i, float(v), 0.5) for i, v in enumerate(values)]
        records.append(_record(17, 0.05, 0.5))
        records.append(_record(18, 0.95, 0.5))

        bins = attention_histogram(records, layer=3)
        assert [b.count for b in bins] == [3, 2, 2, 2, 2, 2, 2, 2]
        assert bins[0].low == pytest.approx(0.15)
        assert bins[-1].high == pytest.approx(0.85)
        assert all(a.high <= b.low for a, b in zip(bins, bins[1:]))

    def test_bin_mean_iou(self):
        """Test each bin averages the IoU of its members."""
        records = [_record(i, 0.1 + 0.05 * i, 0.1 * (i % 2)) for i in range(16)]
        bins = attention_histogram(records, layer=3)
        assert all(b.count == 2 for b in bins)
        assert all(b.mean_iou == pytest.approx(0.05) for b in bins)

    def test_insufficient_samples(self):
        """Test fewer retained samples than bins."""
        records = [_record(i, 0.5, 0.5) for i in range(7)]
        with pytest.raises(DatasetError):
            attention_histogram(records, layer=3)


class TestBoxRatioCurve:
    """Test the attention-versus-box-ratio curve."""

    def setup_method(self):
        """Set up test fixtures."""
        rng = np.random.default_rng(0)
        self.records = [
            _record(i, float(rng.uniform(0.0, 1.0)), 0.5, ratio=float(rng.uniform(0.02, 0.3)))
            for i in range(57)
        ]

    def test_width_intervals_partition_range(self):
        """Test even-width intervals cover the observed ratios exactly once."""
        curve = box_ratio_curve(self.records, layer=3, mode="width")
        ratios = [r.box_ratio for r in self.records]
        assert len(curve) == 10
        assert curve[0].low == pytest.approx(min(ratios))
        assert curve[-1].high == pytest.approx(max(ratios))
        assert all(a.high == b.low for a, b in zip(curve, curve[1:]))
        assert sum(c.count for c in curve) == len(self.records)

    def test_count_intervals(self):
        """Test equal-count intervals differ in size by at most one."""
        curve = box_ratio_curve(self.records, layer=3, mode="count")
        counts = [c.count for c in curve]
        assert sum(counts) == len(self.records)
        assert max(counts) - min(counts) <= 1

    def test_interval_means(self):
        """Test each interval reports the mean attention of its members."""
        records = [_record(0, 0.2, 0.5, ratio=0.1), _record(1, 0.4, 0.5, ratio=0.1),
                   _record(2, 0.9, 0.5, ratio=0.5)]
        curve = box_ratio_curve(records, layer=3, n_intervals=2)
        assert curve[0].count == 2
        assert curve[0].mean_attention == pytest.approx(0.3)
        assert curve[1].mean_attention == pytest.approx(0.9)

    def test_empty_interval(self):
        """Test an interval without records has no mean."""
        records = [_record(0, 0.2, 0.5, ratio=0.1), _record(1, 0.8, 0.5, ratio=0.9)]
        curve = box_ratio_curve(records, layer=3, n_intervals=4)
        assert curve[1].count == 0
        assert curve[1].mean_attention is None

    def test_unknown_mode(self):
        """Test an unsupported interval mode."""
        with pytest.raises(ValueError):
            box_ratio_curve(self.records, layer=3, mode="log")


class TestSummaryStatistics:
    """Test accuracy and per-layer rho."""

    def test_accuracy_is_strict(self):
        """Test IoU exactly at the threshold does not count."""
        assert accuracy([_record(0, 0.5, 0.4), _record(1, 0.5, 0.6)]) == 0.5
        assert accuracy([_record(0, 0.5, 0.5)]) == 0.0
        with pytest.raises(DatasetError):
            accuracy([])
        with pytest.raises(ValueError):
            accuracy([_record(0, 0.5, 0.6)], threshold=1.0)

    def test_rho_profile(self):
        """Test per-layer rho matches the rank correlation of each layer."""
        rng = np.random.default_rng(5)
        records = [
            _record(i, [float(v) for v in rng.uniform(0, 1, 2)], float(rng.uniform(0, 1)), layers=(0, 1))
            for i in range(30)
        ]
        profile = layer_rho_profile(records)
        ious = [r.iou for r in records]
        for layer in (0, 1):
            expected = spearman([r.in_mask(layer) for r in records], ious)
            assert profile[layer] == pytest.approx(expected)
            assert -1.0 <= profile[layer] <= 1.0

    def test_rho_profile_undefined(self):
        """Test a constant layer has no correlation."""
        records = [_record(i, 0.5, 0.1 * i) for i in range(5)]
        assert layer_rho_profile(records) == {3: None}
        with pytest.raises(DatasetError):
            layer_rho_profile(records[:1])


class TestReports:
    """Test end-to-end reports on a freshly initialized model."""

    def setup_method(self):
        """Set up test fixtures."""
        self.run_config = ConfigurationManager.create_config_from_template("tiny")
        self.dataset = generate(self.run_config.dataset)
        self.params = init_params(self.run_config.model, seed=0)

    def test_collect(self):
        """Test one record per sample with bounded statistics."""
        records = collect(self.params, self.dataset.val, [1, 0])
        assert [r.sample_id for r in records] == [s.sample_id for s in self.dataset.val]
        for r in records:
            assert r.layers == [0, 1]
            assert all(0.0 <= s <= 1.0 for s in r.in_mask_sums)
            assert 0.0 <= r.iou <= 1.0

    def test_report_records_small_histogram(self):
        """Test a report over few samples notes the skipped histogram."""
        records = collect(self.params, self.dataset.val, [0, 1])
        report = build_report(records, metadata={"split": "val"})
        assert report.n_samples == len(self.dataset.val)
        assert report.histogram is None
        assert "insufficient samples" in report.histogram_error
        assert report.histogram_layer == 1
        assert len(report.box_ratio_curve) == 10

        data = json.loads(report.to_json_text())
        assert data["metadata"] == {"split": "val"}
        assert set(data["rho_profile"]) == {"0", "1"}

    def test_save_and_export(self):
        """Test the JSON report and CSV export land on disk."""
        records = collect(self.params, self.dataset.train, [1])
        report = build_report(records)
        with tempfile.TemporaryDirectory() as tmp_dir:
            report_path = report.save(Path(tmp_dir) / "out" / "report.json")
            csv_path = export_csv(records, Path(tmp_dir) / "records.csv")

            assert json.loads(report_path.read_text())["n_samples"] == len(records)
            with open(csv_path, newline="") as f:
                rows = list(csv.DictReader(f))
        assert len(rows) == len(records)
        assert "in_mask_layer_1" in rows[0]
        assert rows[0]["sample_id"] == records[0].sample_id

    def test_attention_grids(self):
        """Test maps come back on the visual grid with the ground-truth mask."""
        sample = self.dataset.val[0]
        grids = attention_grids(self.params, sample, [0, 1])
        rows, cols = sample.grid
        assert grids["grid"] == [rows, cols]
        assert set(grids["maps"]) == {"0", "1"}
        assert np.array(grids["maps"]["1"]).shape == (rows, cols)
        assert np.sum(grids["maps"]["0"]) == pytest.approx(1.0)
        assert np.array(grids["mask"]).sum() >= 1
        json.dumps(grids)
