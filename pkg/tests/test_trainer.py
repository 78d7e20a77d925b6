"""
Tests for training, resumption, evaluation, gradient checking and comparison.
"""

import json
import shutil
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from attbalance.config import ConfigurationManager, apply_overrides, load_config
from attbalance.data import generate
from attbalance.errors import ConfigMismatchError, NumericalError
from attbalance.model import forward, init_params, load_checkpoint
from attbalance.trainer import (
    AttBalanceTrainer,
    check_compatible,
    compare,
    evaluate,
    grad_check_cmd,
    resolve_checkpoint,
)


def _tiny(**overrides):
    return ConfigurationManager.create_config_from_template("tiny", overrides or None)


def _lines(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


class TestTrainer:
    """Test the training loop on the tiny template."""

    def setup_method(self):
        """Set up test fixtures."""
        self.config = _tiny()
        self.dataset = generate(self.config.dataset)

    def test_modes_share_initialization(self):
        """Test baseline and regularized runs predict identically before any update."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            regularized = AttBalanceTrainer(self.config, self.dataset, Path(tmp_dir) / "a")
            baseline = AttBalanceTrainer(_tiny(mode="baseline"), self.dataset, Path(tmp_dir) / "b")
        sample = self.dataset.train[0]
        np.testing.assert_array_equal(
            forward(regularized.params, sample, [])[0].data,
            forward(baseline.params, sample, [])[0].data,
        )

    def test_schedule(self):
        """Test step counts and deterministic batches."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            trainer = AttBalanceTrainer(self.config, self.dataset, tmp_dir)
            assert trainer.steps_per_epoch == 4
            assert trainer.total_steps == 8

            epoch_0 = [i for step in range(4) for i in trainer.batch_indices(step)]
            assert sorted(epoch_0) == list(range(8))
            assert trainer.batch_indices(5) == trainer.batch_indices(5)
            other = AttBalanceTrainer(_tiny(seed=1), self.dataset, Path(tmp_dir) / "other")
            assert [other.batch_indices(s) for s in range(4)] != [
                trainer.batch_indices(s) for s in range(4)
            ]

    def test_train_writes_outputs(self):
        """Test metrics, timing and the final checkpoint."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            trainer = AttBalanceTrainer(self.config, self.dataset, tmp_dir)
            result = trainer.train()

            assert result.final_step == 8
            assert result.checkpoint_path == Path(tmp_dir) / "checkpoints" / "final.ckpt"
            assert result.checkpoint_path.exists()
            assert (Path(tmp_dir) / "timing.jsonl").exists()

            events = _lines(result.metrics_path)
            assert [e["step"] for e in events] == list(range(8))
            assert [e["epoch"] for e in events] == [0] * 4 + [1] * 4
            assert all(np.isfinite(e["total"]) and e["grad_norm"] >= 0 for e in events)
            assert "eval" in events[-1]
            assert len(result.evaluations) == 1
            assert result.last_breakdown.total == events[-1]["total"]

            ckpt = load_checkpoint(result.checkpoint_path)
            assert ckpt.step == 8
            assert ckpt.momentum is not None
            assert ckpt.dataset_fingerprint == self.dataset.fingerprint()

    def test_metrics_are_deterministic(self):
        """Test two runs of one config write identical metrics."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            paths = []
            for name in ("first", "second"):
                trainer = AttBalanceTrainer(self.config, self.dataset, Path(tmp_dir) / name)
                paths.append(trainer.train(max_steps=5).metrics_path)
            assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_baseline_has_no_regularizer(self):
        """Test baseline runs carry no momentum and zero attention losses."""
        config = _tiny(mode="baseline")
        with tempfile.TemporaryDirectory() as tmp_dir:
            trainer = AttBalanceTrainer(config, self.dataset, tmp_dir)
            assert trainer.momentum is None
            event = trainer.train_step()
        assert event["l_ar"] == 0.0
        assert event["total"] == pytest.approx(event["l_1"] + event["l_giou"])

    def test_resume_continues_identically(self):
        """Test a resumed run reproduces the uninterrupted trajectory."""
        config = _tiny(checkpoint_every_steps=2)
        with tempfile.TemporaryDirectory() as tmp_dir:
            full = AttBalanceTrainer(config, self.dataset, Path(tmp_dir) / "full")
            reference = _lines(full.train().metrics_path)
            checkpoint = full.checkpoint_dir / "step_000004.ckpt"
            assert checkpoint.exists()

            resumed = AttBalanceTrainer.resume(checkpoint, self.dataset, Path(tmp_dir) / "resumed")
            assert resumed.step == 4
            events = _lines(resumed.train(max_steps=2).metrics_path)

        assert [e["step"] for e in events] == [4, 5]
        for got, want in zip(events, reference[4:6]):
            assert got["total"] == pytest.approx(want["total"], abs=1e-9)
            assert got["l_ar"] == pytest.approx(want["l_ar"], abs=1e-9)

    def test_resume_in_place_truncates_metrics(self):
        """Test resuming in the same directory drops steps past the checkpoint."""
        config = _tiny(checkpoint_every_steps=3)
        with tempfile.TemporaryDirectory() as tmp_dir:
            AttBalanceTrainer(config, self.dataset, tmp_dir).train()
            checkpoint = Path(tmp_dir) / "checkpoints" / "step_000003.ckpt"
            resumed = AttBalanceTrainer.resume(checkpoint, self.dataset, tmp_dir)
            resumed.train(max_steps=1)
            steps = [e["step"] for e in _lines(resumed.metrics_path)]
        assert steps == [0, 1, 2, 3]

    def test_resume_on_other_dataset(self):
        """Test a checkpoint refuses a dataset it was not trained on."""
        other = generate(replace(self.config.dataset, seed=9))
        with tempfile.TemporaryDirectory() as tmp_dir:
            trainer = AttBalanceTrainer(self.config, self.dataset, tmp_dir)
            path = trainer.save_checkpoint("start.ckpt")
            with pytest.raises(ConfigMismatchError):
                AttBalanceTrainer.resume(path, other, Path(tmp_dir) / "other")

    def test_last_good_checkpoint(self):
        """Test a non-finite update saves the state before the failing step."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            trainer = AttBalanceTrainer(self.config, self.dataset, tmp_dir)
            trainer.train(max_steps=1)
            before = trainer.params.arrays()

            def poison(params, grads):
                for name, t in params.items():
                    t.assign(np.full(t.shape, np.nan))

            trainer.optimizer.step = poison
            with pytest.raises(NumericalError):
                trainer.train()

            ckpt = load_checkpoint(Path(tmp_dir) / "checkpoints" / "last_good.ckpt")
            assert ckpt.step == 1
            for name, array in before.items():
                np.testing.assert_array_equal(ckpt.params[name].data, array)
            assert trainer.params.all_finite()

    def test_invalid_config(self):
        """Test an invalid configuration is refused."""
        config = _tiny(**{"attbalance.momentum": 1.5})
        with tempfile.TemporaryDirectory() as tmp_dir:
            with pytest.raises(ValueError):
                AttBalanceTrainer(config, self.dataset, tmp_dir)


class TestCompatibility:
    """Test model/dataset agreement checks."""

    def test_grid_mismatch(self):
        """Test a dataset on another grid is rejected."""
        config = _tiny()
        dataset = generate(replace(config.dataset, grid_h=4, grid_w=4))
        with pytest.raises(ConfigMismatchError):
            check_compatible(config, dataset)
        check_compatible(config, generate(config.dataset))

    def test_resolve_checkpoint(self):
        """Test run directories resolve to their final checkpoint."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            with pytest.raises(FileNotFoundError):
                resolve_checkpoint(tmp_dir)
            final = Path(tmp_dir) / "checkpoints" / "final.ckpt"
            final.parent.mkdir()
            final.write_bytes(b"")
            assert resolve_checkpoint(tmp_dir) == final


class TestEvaluationAndComparison:
    """Test evaluation of saved runs and their comparison."""

    def setup_method(self):
        """Set up test fixtures."""
        self.config = _tiny()
        self.dataset = generate(self.config.dataset)

    def _train(self, root, name, **overrides):
        config = apply_overrides(self.config, overrides) if overrides else self.config
        AttBalanceTrainer(config, self.dataset, Path(root) / name).train(max_steps=3)
        return Path(root) / name

    def test_evaluate(self):
        """Test the report, its metadata and the CSV export."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            run = self._train(tmp_dir, "run")
            report = evaluate(
                run,
                self.dataset,
                capture_layers=[1],
                output_path=Path(tmp_dir) / "report.json",
                csv_path=Path(tmp_dir) / "records.csv",
            )
            assert report.layers == [1]
            assert report.metadata["step"] == 3
            assert report.metadata["split"] == "val"
            assert report.n_samples == 4
            assert (Path(tmp_dir) / "records.csv").exists()
            saved = json.loads((Path(tmp_dir) / "report.json").read_text())
            assert saved["accuracy_at_05"] == report.accuracy_at_05

            full = evaluate(run, self.dataset, split="train")
            assert full.layers == [0, 1]
            assert full.n_samples == 8

    def test_compare(self):
        """Test deltas run from the first to the second run."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            a = self._train(tmp_dir, "a", mode="baseline")
            b = self._train(tmp_dir, "b")
            result = compare(a, b, self.dataset, output_path=Path(tmp_dir) / "cmp.json")
            assert (Path(tmp_dir) / "cmp.json").exists()

        assert result["a"]["run_config"]["mode"] == "baseline"
        assert result["b"]["run_config"]["mode"] == "attbalance"
        delta = result["delta"]
        assert delta["acc@0.5"] == pytest.approx(result["b"]["acc@0.5"] - result["a"]["acc@0.5"])
        assert delta["mean_in_mask_final_layer"] == pytest.approx(
            result["b"]["mean_in_mask_final_layer"] - result["a"]["mean_in_mask_final_layer"]
        )

    def test_evaluate_is_repeatable(self):
        """Test two evaluations of one checkpoint write identical reports."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            run = self._train(tmp_dir, "run")
            first, second = Path(tmp_dir) / "first.json", Path(tmp_dir) / "second.json"
            report = evaluate(run, self.dataset, output_path=first)
            evaluate(run, self.dataset, output_path=second)
            assert first.read_bytes() == second.read_bytes()
        assert 0.0 <= report.accuracy_at_05 <= 1.0

    def test_compare_with_itself(self):
        """Test a run compared with itself has zero deltas."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            run = self._train(tmp_dir, "run")
            result = compare(run, run, self.dataset)
        delta = result["delta"]
        assert delta["acc@0.5"] == 0.0
        assert delta["mean_iou"] == 0.0
        assert delta["mean_in_mask_final_layer"] == 0.0
        assert all(d in (0.0, None) for d in delta["rho_profile"].values())
        assert result["a"]["run_config"] == self.config.to_dict()

    def test_compare_requires_same_dataset(self):
        """Test runs trained on different data are not compared."""
        other_config = _tiny(**{"dataset.seed": 5})
        other = generate(other_config.dataset)
        with tempfile.TemporaryDirectory() as tmp_dir:
            a = self._train(tmp_dir, "a")
            AttBalanceTrainer(other_config, other, Path(tmp_dir) / "b").train(max_steps=1)
            with pytest.raises(ConfigMismatchError):
                compare(a, Path(tmp_dir) / "b", self.dataset)


class TestGradCheckCommand:
    """Test the finite-difference check of the full training loss."""

    def test_passes(self):
        """Test analytic gradients agree on several seeds."""
        result = grad_check_cmd(_tiny(), seeds=(0, 1, 2), tol=1e-4, entries=4)
        assert result.passed
        assert set(result.reports) == {0, 1, 2}
        assert result.summary_lines()[-1] == "PASS"

    def test_reports_every_parameter_once(self):
        """Test each parameter group appears exactly once per seed."""
        config = _tiny()
        result = grad_check_cmd(config, seeds=(0,), entries=2)
        names = init_params(config.model, 0).names()
        assert list(result.reports[0].errors) == names
        assert all(result.reports[0].checked_entries[n] <= 2 for n in names)

    def test_baseline_passes(self):
        """Test the check also covers the unregularized loss."""
        assert grad_check_cmd(_tiny(mode="baseline"), entries=4).passed

    def test_corrupted_rule_fails(self):
        """Test a scaled gradient rule is detected."""
        result = grad_check_cmd(_tiny(), seeds=(0,), entries=4, corrupt_op="linear")
        assert not result.passed
        assert result.summary_lines()[-1] == "FAIL"
        assert result.max_error > 1e-4


@pytest.mark.slow
class TestRegularizationEffect:
    """Test the directional experiment in configs/directional.yaml."""

    @classmethod
    def setup_class(cls):
        """Train the baseline and the regularized run once on shared data."""
        config = load_config(Path(__file__).resolve().parent.parent / "configs" / "directional.yaml")
        dataset = generate(config.dataset)
        cls.tmp_dir = tempfile.mkdtemp()
        cls.untrained = {}
        cls.scores = {}
        cls.events = {}
        for mode in ("baseline", "attbalance"):
            trainer = AttBalanceTrainer(
                apply_overrides(config, {"mode": mode}), dataset, Path(cls.tmp_dir) / mode
            )
            cls.untrained[mode] = trainer.evaluate_split(trainer.val_samples)
            result = trainer.train()
            cls.scores[mode] = trainer.evaluate_split(trainer.val_samples)
            cls.events[mode] = (_lines(result.metrics_path), trainer.steps_per_epoch)

    @classmethod
    def teardown_class(cls):
        """Remove the run directories."""
        shutil.rmtree(cls.tmp_dir, ignore_errors=True)

    def test_in_mask_margin(self):
        """Test val final-layer in-box attention rises by at least 0.10."""
        delta = (
            self.scores["attbalance"]["mean_in_mask_final_layer"]
            - self.scores["baseline"]["mean_in_mask_final_layer"]
        )
        assert delta >= 0.10

    def test_accuracy_is_kept(self):
        """Test val acc@0.5 does not drop by more than 0.01."""
        assert self.scores["baseline"]["acc@0.5"] > 0.0
        assert self.scores["attbalance"]["acc@0.5"] >= self.scores["baseline"]["acc@0.5"] - 0.01

    @pytest.mark.parametrize("mode", ["baseline", "attbalance"])
    def test_loss_decreases_over_training(self, mode):
        """Test the last epoch's mean loss is at most the first epoch's."""
        events, per_epoch = self.events[mode]
        first = np.mean([e["total"] for e in events[:per_epoch]])
        last = np.mean([e["total"] for e in events[-per_epoch:]])
        assert last <= first

    @pytest.mark.parametrize("mode", ["baseline", "attbalance"])
    def test_trained_beats_untrained(self, mode):
        """Test training raises the val mean IoU above the initial model's."""
        assert self.untrained[mode]["mean_iou"] < self.scores[mode]["mean_iou"]
