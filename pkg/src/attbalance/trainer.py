"""
Training, evaluation, gradient checking and run comparison.

All randomness flows from ``RunConfig.seed`` through named substreams
(parameter init, data order, crop augmentation, gradient-check sampling), so
a run is reproducible from its config and resumable from any checkpoint.
"""

import contextlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .analysis import AnalysisReport, build_report, collect, export_csv
from .config.run_config import RunConfig
from .data import GroundingDataset, augment_crop, generate
from .data.dataset import GroundingSample
from .errors import ConfigMismatchError, DatasetError, NumericalError
from .losses import (
    LossBreakdown,
    LossWeights,
    attbalance_active,
    compute_components,
    compute_weights,
    total_loss,
)
from .model import (
    Checkpoint,
    MomentumState,
    ModelParams,
    forward_batch,
    init_params,
    load_checkpoint,
    momentum_forward,
    save_checkpoint,
)
from .numerics import GradCheckReport, Tape, Tensor, corrupted_gradient, grad_check, no_grad
from .optim import build_optimizer, clip_grad_norm, collect_grads, global_norm

logger = logging.getLogger(__name__)

DATA_ORDER_STREAM = 2
AUGMENT_STREAM = 3
GRAD_CHECK_STREAM = 4

METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"
CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.ckpt"
LAST_GOOD_CHECKPOINT = "last_good.ckpt"
GRAD_CHECK_TOL = 1e-4


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True)


def check_compatible(config: RunConfig, dataset: GroundingDataset) -> None:
    """Raise :class:`ConfigMismatchError` when ``dataset`` cannot feed the model of ``config``."""
    model, data = config.model, dataset.config
    problems = []
    if (model.grid_h, model.grid_w) != (data.grid_h, data.grid_w):
        problems.append(f"grid {model.grid_h}x{model.grid_w} vs {data.grid_h}x{data.grid_w}")
    if model.vocab_size != data.vocab_size:
        problems.append(f"vocab_size {model.vocab_size} vs {data.vocab_size}")
    if model.feature_dim != data.feature_dim:
        problems.append(f"feature_dim {model.feature_dim} vs {data.feature_dim}")
    if model.max_text_len < data.max_text_len:
        problems.append(f"max_text_len {model.max_text_len} < {data.max_text_len}")
    if problems:
        raise ConfigMismatchError("model and dataset disagree: " + "; ".join(problems))


@dataclass
class TrainingResult:
    final_step: int
    checkpoint_path: Path
    metrics_path: Path
    last_breakdown: Optional[LossBreakdown] = None
    evaluations: List[Dict[str, Any]] = field(default_factory=list)


class AttBalanceTrainer:
    """Runs one training configuration end to end."""

    def __init__(
        self,
        config: RunConfig,
        dataset: Optional[GroundingDataset] = None,
        output_dir: Optional[Union[str, Path]] = None,
    ):
        if not config.validate():
            raise ValueError(f"Invalid configuration for run {config.run_name}; see log for details")
        self.config = config
        self.output_dir = Path(output_dir or config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

        if dataset is None:
            dataset = generate(config.dataset)
        elif asdict(dataset.config) != asdict(config.dataset):
            logger.warning("Dataset file was generated with a different dataset config")
        check_compatible(config, dataset)
        self.dataset = dataset
        self.dataset_fingerprint = dataset.fingerprint()
        self.train_samples = dataset.train
        if not self.train_samples:
            raise DatasetError("training split is empty")
        self.val_samples = dataset.val

        self.params = init_params(config.model, config.seed)
        self.momentum: Optional[MomentumState] = (
            MomentumState.init(self.params, config.attbalance.momentum)
            if config.attbalance_enabled
            else None
        )
        self.optimizer = build_optimizer(config.optimizer)
        self.step = 0
        self.steps_per_epoch = math.ceil(len(self.train_samples) / config.optimizer.batch_size)
        self.total_steps = config.optimizer.epochs * self.steps_per_epoch
        self.metrics_path = self.output_dir / METRICS_FILE
        self.checkpoint_dir = self.output_dir / CHECKPOINT_DIR

        logger.info(
            f"Initialized run '{config.run_name}' ({config.mode}): "
            f"{self.params.num_parameters()} parameters, {len(self.train_samples)} training samples, "
            f"{self.total_steps} steps"
        )

    # ------------------------------------------------------------------
    # Batches
    # ------------------------------------------------------------------

    def epoch_of(self, step: int) -> int:
        return step // self.steps_per_epoch

    def batch_indices(self, step: int) -> List[int]:
        """Training-set indices of ``step``'s batch; order is reshuffled per epoch."""
        epoch, position = divmod(step, self.steps_per_epoch)
        rng = np.random.default_rng([self.config.seed, DATA_ORDER_STREAM, epoch])
        order = rng.permutation(len(self.train_samples))
        size = self.config.optimizer.batch_size
        return [int(i) for i in order[position * size : (position + 1) * size]]

    def batch(self, step: int) -> List[GroundingSample]:
        epoch = self.epoch_of(step)
        data = self.config.dataset
        samples = []
        for index in self.batch_indices(step):
            sample = self.train_samples[index]
            if data.crop_augment:
                seed = [self.config.seed, AUGMENT_STREAM, epoch, index]
                sample = augment_crop(sample, seed, data.crop_min_scale)
            samples.append(sample)
        return samples

    # ------------------------------------------------------------------
    # Loss and updates
    # ------------------------------------------------------------------

    def compute_loss(
        self,
        samples: Sequence[GroundingSample],
        epoch: int,
        weights: Optional[LossWeights] = None,
    ) -> Tuple[Tensor, LossBreakdown]:
        """Forward the batch and assemble the total loss of ``epoch``."""
        return LossEvaluator(self.config, self.params, self.momentum).loss(samples, epoch, weights)

    def train_step(self) -> Dict[str, Any]:
        """One optimizer step; returns the metrics event of the step."""
        step = self.step
        epoch = self.epoch_of(step)
        samples = self.batch(step)

        self.params.zero_grad()
        with Tape() as tape:
            loss, breakdown = self.compute_loss(samples, epoch)
            tape.backward(loss)
        raw = collect_grads(self.params)
        grad_norm = global_norm(raw)
        grads = clip_grad_norm(raw, self.config.optimizer.grad_clip)
        previous = (self.params.arrays(), self.optimizer.state_dict())
        self.optimizer.step(self.params, grads)
        if not self.params.all_finite():
            self.params.load_arrays(previous[0])
            self.optimizer.load_state_dict(previous[1])
            raise NumericalError(f"parameters became non-finite at step {step}", component="parameters")
        if self.momentum is not None:
            self.momentum.update(self.params, self.config.attbalance.momentum)
        self.step += 1

        event: Dict[str, Any] = {"step": step, "epoch": epoch}
        event.update(breakdown.to_dict())
        event["learning_rate"] = self.config.optimizer.learning_rate
        event["grad_norm"] = grad_norm
        logger.debug(f"step {step} epoch {epoch} total {breakdown.total:.6f}")
        return event

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params=self.params,
            step=self.step,
            run_config=self.config,
            momentum=self.momentum,
            optimizer_state=self.optimizer.state_dict(),
            dataset_fingerprint=self.dataset_fingerprint,
        )

    def save_checkpoint(self, name: Optional[str] = None) -> Path:
        name = name or f"step_{self.step:06d}.ckpt"
        return save_checkpoint(self.checkpoint_dir / name, self.checkpoint())

    @classmethod
    def resume(
        cls,
        checkpoint_path: Union[str, Path],
        dataset: Optional[GroundingDataset] = None,
        output_dir: Optional[Union[str, Path]] = None,
    ) -> "AttBalanceTrainer":
        """Rebuild a trainer from a checkpoint written by :meth:`save_checkpoint`."""
        ckpt = load_checkpoint(checkpoint_path)
        if ckpt.run_config is None:
            raise ConfigMismatchError(f"{checkpoint_path}: checkpoint carries no run config")
        trainer = cls(ckpt.run_config, dataset=dataset, output_dir=output_dir)
        if ckpt.dataset_fingerprint and ckpt.dataset_fingerprint != trainer.dataset_fingerprint:
            raise ConfigMismatchError(
                f"{checkpoint_path}: checkpoint was trained on a different dataset"
            )
        trainer.params.load_arrays(ckpt.params.arrays())
        if trainer.momentum is not None:
            if ckpt.momentum is None:
                raise ConfigMismatchError(f"{checkpoint_path}: momentum state missing")
            trainer.momentum.shadow.load_arrays(ckpt.momentum.shadow.arrays())
            trainer.momentum.step_count = ckpt.momentum.step_count
        trainer.optimizer.load_state_dict(ckpt.optimizer_state)
        trainer.step = ckpt.step
        logger.info(f"Resumed run '{trainer.config.run_name}' at step {trainer.step}")
        return trainer

    # ------------------------------------------------------------------
    # Evaluation and the training loop
    # ------------------------------------------------------------------

    def evaluate_split(self, samples: Sequence[GroundingSample]) -> Dict[str, Any]:
        layers = list(range(self.config.model.n_layers))
        records = collect(self.params, samples, layers)
        report = build_report(records)
        final = str(layers[-1])
        return {
            "acc@0.5": report.accuracy_at_05,
            "mean_iou": report.mean_iou,
            "mean_in_mask_final_layer": report.mean_in_mask[final],
            "rho_profile": report.rho_profile,
        }

    def _prepare_metrics(self) -> None:
        """Drop metrics lines at or past the current step, then append from there."""
        if self.step == 0 or not self.metrics_path.exists():
            self.metrics_path.write_text("", encoding="utf-8")
            return
        kept = [
            line
            for line in self.metrics_path.read_text(encoding="utf-8").splitlines()
            if line.strip() and json.loads(line)["step"] < self.step
        ]
        self.metrics_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")

    def train(self, max_steps: Optional[int] = None) -> TrainingResult:
        """Train until the configured number of epochs (or ``max_steps`` more steps)."""
        cfg = self.config
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        self._prepare_metrics()
        timing_path = self.output_dir / TIMING_FILE
        evaluations: List[Dict[str, Any]] = []
        breakdown = None

        logger.info(f"Training '{cfg.run_name}' from step {self.step} to {stop}")
        with open(self.metrics_path, "a", encoding="utf-8") as metrics, open(
            timing_path, "a", encoding="utf-8"
        ) as timing:
            while self.step < stop:
                start = time.perf_counter()
                try:
                    event = self.train_step()
                except NumericalError as e:
                    path = self.save_checkpoint(LAST_GOOD_CHECKPOINT)
                    logger.error(
                        f"Non-finite {e.component or 'value'} at step {self.step}; "
                        f"last good state saved to {path}"
                    )
                    raise
                epoch = event["epoch"]
                epoch_done = self.step % self.steps_per_epoch == 0
                if epoch_done and self.val_samples and (
                    (epoch + 1) % cfg.eval_every_epochs == 0 or self.step == self.total_steps
                ):
                    event["eval"] = self.evaluate_split(self.val_samples)
                    evaluations.append({"step": event["step"], "epoch": epoch, **event["eval"]})
                    logger.info(
                        f"Epoch {epoch}: val acc@0.5 {event['eval']['acc@0.5']:.3f}, "
                        f"final-layer in-mask {event['eval']['mean_in_mask_final_layer']:.3f}"
                    )
                metrics.write(_dumps(event) + "\n")
                metrics.flush()
                timing.write(
                    _dumps({"step": event["step"], "wall_ms": (time.perf_counter() - start) * 1e3})
                    + "\n"
                )
                breakdown = event
                if cfg.checkpoint_every_steps and self.step % cfg.checkpoint_every_steps == 0:
                    self.save_checkpoint()
                if epoch_done:
                    logger.info(f"Epoch {epoch} finished (step {self.step}, loss {event['total']:.5f})")

        final_path = self.save_checkpoint(FINAL_CHECKPOINT)
        last = None
        if breakdown is not None:
            known = LossBreakdown.__dataclass_fields__
            last = LossBreakdown(**{k: v for k, v in breakdown.items() if k in known})
        return TrainingResult(
            final_step=self.step,
            checkpoint_path=final_path,
            metrics_path=self.metrics_path,
            last_breakdown=last,
            evaluations=evaluations,
        )


# ----------------------------------------------------------------------
# Evaluation of saved checkpoints
# ----------------------------------------------------------------------


def resolve_checkpoint(path: Union[str, Path]) -> Path:
    """A checkpoint file, or a run directory holding ``checkpoints/final.ckpt``."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_DIR / FINAL_CHECKPOINT
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return path


def evaluate(
    checkpoint_path: Union[str, Path],
    dataset: GroundingDataset,
    capture_layers: Optional[Sequence[int]] = None,
    split: str = "val",
    output_path: Optional[Union[str, Path]] = None,
    curve_mode: str = "width",
    histogram_layer: Optional[int] = None,
    csv_path: Optional[Union[str, Path]] = None,
) -> AnalysisReport:
    """Analysis report of a checkpoint on one dataset split.

    With ``csv_path`` set, the per-sample records are exported as well.
    """
    checkpoint_path = resolve_checkpoint(checkpoint_path)
    ckpt = load_checkpoint(checkpoint_path)
    config = ckpt.run_config or RunConfig(model=ckpt.model_config, dataset=dataset.config)
    check_compatible(config, dataset)
    fingerprint = dataset.fingerprint()
    if ckpt.dataset_fingerprint and ckpt.dataset_fingerprint != fingerprint:
        logger.info("Evaluating on a dataset other than the training dataset")

    samples = dataset.split(split)
    if not samples:
        raise DatasetError(f"split '{split}' is empty")
    layers = sorted(capture_layers) if capture_layers else list(range(ckpt.model_config.n_layers))
    records = collect(ckpt.params, samples, layers)
    report = build_report(
        records,
        histogram_layer=histogram_layer,
        curve_mode=curve_mode,
        metadata={
            "run_name": config.run_name,
            "mode": config.mode,
            "step": ckpt.step,
            "split": split,
            "dataset_fingerprint": fingerprint,
        },
    )
    if output_path is not None:
        report.save(output_path)
    if csv_path is not None:
        export_csv(records, csv_path)
    logger.info(
        f"Evaluated step {ckpt.step} on {len(samples)} {split} samples: acc@0.5 {report.accuracy_at_05:.3f}"
    )
    return report


# ----------------------------------------------------------------------
# Gradient check
# ----------------------------------------------------------------------


@dataclass
class GradCheckResult:
    reports: Dict[int, GradCheckReport]
    tol: float
    corrupt_op: Optional[str] = None

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    @property
    def max_error(self) -> float:
        return max((r.max_error for r in self.reports.values()), default=0.0)

    def summary_lines(self) -> List[str]:
        lines = []
        for seed, report in self.reports.items():
            lines.append(f"seed {seed}: max rel. error {report.max_error:.3e} (tol {self.tol:g})")
            lines.extend("  " + line for line in report.summary_lines())
        lines.append("PASS" if self.passed else "FAIL")
        return lines


def grad_check_cmd(
    config: RunConfig,
    seeds: Sequence[int] = (0,),
    tol: float = GRAD_CHECK_TOL,
    entries: Optional[int] = None,
    corrupt_op: Optional[str] = None,
) -> GradCheckResult:
    """Finite-difference check of the full training loss on a 2-sample batch.

    Rhos and difficulty weights are computed once at the base point and held
    fixed. The momentum shadow is drawn from a different seed so the MRC term
    has a non-zero gradient.
    """
    if not config.validate():
        raise ValueError("Invalid configuration; see log for details")
    dataset = generate(config.dataset)
    check_compatible(config, dataset)
    samples = dataset.train[:2]
    if len(samples) < 2:
        raise DatasetError("gradient check needs at least 2 training samples")

    entries = config.grad_check_entries if entries is None else entries
    reports: Dict[int, GradCheckReport] = {}
    for seed in seeds:
        params = init_params(config.model, seed)
        momentum = None
        if config.attbalance_enabled:
            momentum = MomentumState.init(
                init_params(config.model, seed + 1), config.attbalance.momentum
            )
        evaluator = LossEvaluator(config, params, momentum)
        weights = evaluator.frozen_weights(samples, epoch=0)

        def objective() -> Tensor:
            return evaluator.loss(samples, 0, weights)[0]

        sample_seed = int(np.random.default_rng([seed, GRAD_CHECK_STREAM]).integers(2**31))
        fault = corrupted_gradient(corrupt_op) if corrupt_op else contextlib.nullcontext()
        with fault:
            report = grad_check(
                objective, dict(params.items()), tol=tol, entries=entries, seed=sample_seed
            )
        reports[seed] = report
        status = "passed" if report.passed else "FAILED"
        logger.info(f"Gradient check seed {seed} {status}: max rel. error {report.max_error:.3e}")
    return GradCheckResult(reports=reports, tol=tol, corrupt_op=corrupt_op)


class LossEvaluator:
    """Training loss of one parameter set and its momentum shadow."""

    def __init__(
        self, config: RunConfig, params: ModelParams, momentum: Optional[MomentumState] = None
    ):
        self.config = config
        self.params = params
        self.momentum = momentum

    def regularized(self, epoch: int) -> bool:
        return attbalance_active(self.config.attbalance, epoch, self.config.attbalance_enabled)

    def _forward(self, samples: Sequence[GroundingSample], epoch: int):
        cfg = self.config.attbalance
        on = self.regularized(epoch)
        layers = cfg.applied_layers if on else []
        results = forward_batch(self.params, samples, layers)
        moms = None
        if on and cfg.use_mrc and self.momentum is not None:
            moms = [momentum_forward(self.momentum, s, layers) for s in samples]
        return [p for p, _ in results], [a for _, a in results], moms

    def frozen_weights(self, samples: Sequence[GroundingSample], epoch: int) -> LossWeights:
        """Rhos and difficulty weights at the current parameters."""
        cfg = self.config.attbalance
        with no_grad():
            preds, attns, moms = self._forward(samples, epoch)
            components = compute_components(
                preds, attns, samples, cfg, moms, regularize=self.regularized(epoch)
            )
        return compute_weights(components, cfg)

    def loss(
        self,
        samples: Sequence[GroundingSample],
        epoch: int,
        weights: Optional[LossWeights] = None,
    ) -> Tuple[Tensor, LossBreakdown]:
        preds, attns, moms = self._forward(samples, epoch)
        return total_loss(
            preds,
            attns,
            samples,
            self.config.attbalance,
            epoch,
            attn_moms=moms,
            enabled=self.config.attbalance_enabled,
            weights=weights,
        )


# ----------------------------------------------------------------------
# Comparison of two runs
# ----------------------------------------------------------------------


def compare(
    checkpoint_a: Union[str, Path],
    checkpoint_b: Union[str, Path],
    dataset: GroundingDataset,
    split: str = "val",
    output_path: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """Side-by-side evaluation of two runs on the same dataset; deltas are ``b - a``."""
    paths = [resolve_checkpoint(checkpoint_a), resolve_checkpoint(checkpoint_b)]
    ckpts = [load_checkpoint(p) for p in paths]
    fingerprint = dataset.fingerprint()
    for path, ckpt in zip(paths, ckpts):
        if ckpt.dataset_fingerprint and ckpt.dataset_fingerprint != fingerprint:
            raise ConfigMismatchError(f"{path}: trained on a different dataset than the one compared on")
    if ckpts[0].dataset_fingerprint != ckpts[1].dataset_fingerprint:
        raise ConfigMismatchError("the two runs were trained on different datasets")

    sides = []
    for path, ckpt in zip(paths, ckpts):
        report = evaluate(path, dataset, split=split)
        final = str(ckpt.model_config.n_layers - 1)
        sides.append(
            {
                "checkpoint": str(path),
                "run_config": ckpt.run_config.to_dict() if ckpt.run_config else None,
                "step": ckpt.step,
                "acc@0.5": report.accuracy_at_05,
                "mean_iou": report.mean_iou,
                "mean_in_mask_final_layer": report.mean_in_mask[final],
                "rho_profile": report.rho_profile,
            }
        )
    a, b = sides
    rho_delta = {
        layer: (b["rho_profile"][layer] - a["rho_profile"][layer])
        if a["rho_profile"].get(layer) is not None and b["rho_profile"].get(layer) is not None
        else None
        for layer in a["rho_profile"]
        if layer in b["rho_profile"]
    }
    comparison = {
        "dataset_fingerprint": fingerprint,
        "split": split,
        "a": a,
        "b": b,
        "delta": {
            "acc@0.5": b["acc@0.5"] - a["acc@0.5"],
            "mean_iou": b["mean_iou"] - a["mean_iou"],
            "mean_in_mask_final_layer": b["mean_in_mask_final_layer"] - a["mean_in_mask_final_layer"],
            "rho_profile": rho_delta,
        },
    }
    if output_path is not None:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        output_path.write_text(json.dumps(comparison, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        logger.info(f"Comparison saved to {output_path}")
    return comparison
