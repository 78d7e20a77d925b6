"""
Command-line interface for the AttBalance toolkit.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(non-finite values or a failed gradient check).
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .analysis import attention_grids
from .config.run_config import ConfigurationManager, RunConfig, apply_overrides, load_config
from .data import GroundingDataset, generate
from .errors import AttBalanceError, NumericalError
from .model import load_checkpoint
from .trainer import (
    AttBalanceTrainer,
    compare,
    evaluate,
    grad_check_cmd,
    resolve_checkpoint,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class _ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors with exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def setup_logging(verbose: bool = False) -> None:
    """Setup logging configuration."""
    level = logging.DEBUG if verbose else logging.INFO

    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
    )


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, Any]:
    """``KEY=VALUE`` strings to a dotted-key dict; values are parsed as YAML scalars."""
    overrides: Dict[str, Any] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValueError(f"Override must look like KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def build_config(args) -> RunConfig:
    """Config file or template, then ``--set`` overrides, then dedicated flags."""
    if getattr(args, "config", None):
        config = load_config(args.config)
    else:
        config = ConfigurationManager.create_config_from_template(args.template)

    overrides = parse_overrides(getattr(args, "set", None))
    for flag, key in (
        ("seed", "seed"),
        ("mode", "mode"),
        ("epochs", "optimizer.epochs"),
        ("lr", "optimizer.learning_rate"),
        ("output_dir", "output_dir"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _dataset_for(path: Optional[str], config: RunConfig) -> GroundingDataset:
    if path:
        return GroundingDataset.load(path)
    logger.info("No dataset file given; generating it from the configuration")
    return generate(config.dataset)


def _checkpoint_config(path: str) -> RunConfig:
    ckpt = load_checkpoint(resolve_checkpoint(path))
    if ckpt.run_config is None:
        raise ValueError(f"{path}: checkpoint has no run config; pass --dataset")
    return ckpt.run_config


def config_command(args) -> int:
    """Write a template configuration or list the templates."""
    manager = ConfigurationManager()
    if args.template == "list":
        print("Available templates:")
        for name in manager.list_templates():
            info = manager.get_template_info(name)
            print(f"  {name}: {info.get('run_name', name)} ({info.get('mode', 'attbalance')})")
        return EXIT_OK

    config = build_config(args)
    output = Path(args.output or f"{config.run_name}.yaml")
    output.parent.mkdir(parents=True, exist_ok=True)
    if output.suffix.lower() == ".json":
        config.to_json(output)
    else:
        config.to_yaml(output)
    print(f"Configuration saved to: {output}")
    return EXIT_OK


def gen_data_command(args) -> int:
    config = build_config(args)
    if not config.validate():
        return EXIT_USAGE
    dataset = generate(config.dataset)
    file_format = args.format or config.dataset.file_format
    default_name = "dataset.jsonl" if file_format == "jsonl" else "dataset.bin"
    output = Path(args.output) if args.output else Path(config.output_dir) / default_name
    dataset.save(output, file_format)
    print(f"Generated {len(dataset.train)} train / {len(dataset.val)} val samples")
    print(f"Dataset saved to: {output}")
    print(f"Fingerprint: {dataset.fingerprint()}")
    return EXIT_OK


def train_command(args) -> int:
    if args.resume:
        dataset = GroundingDataset.load(args.dataset) if args.dataset else None
        trainer = AttBalanceTrainer.resume(args.resume, dataset=dataset, output_dir=args.output_dir)
    else:
        config = build_config(args)
        dataset = GroundingDataset.load(args.dataset) if args.dataset else None
        trainer = AttBalanceTrainer(config, dataset=dataset)
        trainer.config.to_yaml(trainer.output_dir / "config.yaml")

    print(f"Training run: {trainer.config.run_name} ({trainer.config.mode})")
    result = trainer.train(max_steps=args.max_steps)

    print("\nTraining Complete!")
    print(f"  Steps: {result.final_step}")
    if result.last_breakdown is not None:
        print(f"  Final loss: {result.last_breakdown.total:.5f}")
    if result.evaluations:
        last = result.evaluations[-1]
        print(f"  Val acc@0.5: {last['acc@0.5']:.3f}")
        print(f"  Val final-layer in-mask attention: {last['mean_in_mask_final_layer']:.3f}")
    print(f"\nCheckpoint: {result.checkpoint_path}")
    print(f"Metrics: {result.metrics_path}")
    return EXIT_OK


def _layers(text: Optional[str]) -> Optional[List[int]]:
    if not text:
        return None
    return [int(part) for part in text.split(",") if part.strip()]


def eval_command(args) -> int:
    dataset = (
        GroundingDataset.load(args.dataset)
        if args.dataset
        else generate(_checkpoint_config(args.checkpoint).dataset)
    )
    output = args.output or str(Path(resolve_checkpoint(args.checkpoint)).parent / "report.json")
    report = evaluate(
        args.checkpoint,
        dataset,
        capture_layers=_layers(args.layers),
        split=args.split,
        output_path=output,
        curve_mode=args.curve_mode,
        csv_path=args.csv,
    )
    print(f"Samples: {report.n_samples}")
    print(f"acc@0.5: {report.accuracy_at_05:.4f}")
    print("Per-layer rho:")
    for layer, rho in report.rho_profile.items():
        print(f"  layer {layer}: {'undefined' if rho is None else f'{rho:+.4f}'}")
    print(f"\nReport saved to: {output}")
    return EXIT_OK


def analyze_command(args) -> int:
    """Full report plus per-sample records and attention grids."""
    dataset = (
        GroundingDataset.load(args.dataset)
        if args.dataset
        else generate(_checkpoint_config(args.checkpoint).dataset)
    )
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = _layers(args.layers)
    report = evaluate(
        args.checkpoint,
        dataset,
        capture_layers=layers,
        split=args.split,
        output_path=out_dir / "report.json",
        curve_mode=args.curve_mode,
        csv_path=out_dir / "records.csv",
    )

    ckpt = load_checkpoint(resolve_checkpoint(args.checkpoint))
    grid_layers = layers or list(range(ckpt.model_config.n_layers))
    samples = dataset.split(args.split)[: args.grids]
    grids = [attention_grids(ckpt.params, s, grid_layers) for s in samples]
    grids_path = out_dir / "attention_grids.json"
    grids_path.write_text(json.dumps(grids, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    print(f"acc@0.5: {report.accuracy_at_05:.4f} over {report.n_samples} samples")
    if report.histogram is not None:
        print(f"Histogram (layer {report.histogram_layer}):")
        for b in report.histogram:
            print(f"  [{b.low:.3f}, {b.high:.3f}] n={b.count} mean IoU={b.mean_iou:.3f}")
    else:
        print(f"Histogram skipped: {report.histogram_error}")
    print(f"\nResults saved to: {out_dir}")
    return EXIT_OK


def grad_check_command(args) -> int:
    config = build_config(args)
    result = grad_check_cmd(
        config,
        seeds=args.seeds,
        tol=args.tol,
        entries=args.entries,
        corrupt_op=args.corrupt_op,
    )
    for line in result.summary_lines():
        print(line)
    return EXIT_OK if result.passed else EXIT_NUMERICAL


def compare_command(args) -> int:
    dataset = (
        GroundingDataset.load(args.dataset)
        if args.dataset
        else generate(_checkpoint_config(args.run_a).dataset)
    )
    result = compare(args.run_a, args.run_b, dataset, split=args.split, output_path=args.output)
    delta = result["delta"]
    print(f"{'':<28s}{'A':>10s}{'B':>10s}{'B - A':>10s}")
    for key in ("acc@0.5", "mean_iou", "mean_in_mask_final_layer"):
        a, b = result["a"][key], result["b"][key]
        print(f"{key:<28s}{a:>10.4f}{b:>10.4f}{delta[key]:>+10.4f}")
    for layer, d in delta["rho_profile"].items():
        shown = "undefined" if d is None else f"{d:+.4f}"
        print(f"  rho layer {layer} delta: {shown}")
    if args.output:
        print(f"\nComparison saved to: {args.output}")
    return EXIT_OK


def _add_config_args(p: argparse.ArgumentParser, default_template: str = "reference") -> None:
    p.add_argument("--config", "-c", help="Configuration file (YAML or JSON)")
    p.add_argument(
        "--template", "-t", default=default_template, help="Configuration template when no --config"
    )
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="Override a config field, e.g. attbalance.momentum=0.99 (repeatable)",
    )
    p.add_argument("--seed", type=int, help="Run seed")
    p.add_argument("--output-dir", "-o", dest="output_dir", help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="attbalance",
        description="AttBalance toolkit - attention-regularized visual grounding on synthetic scenes",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate the reference dataset
  attbalance gen-data --template reference --output data/reference.jsonl

  # Train the baseline and the regularized model
  attbalance train --template baseline --dataset data/reference.jsonl
  attbalance train --template reference --dataset data/reference.jsonl

  # Compare both runs on the validation split
  attbalance compare runs/baseline runs/reference --dataset data/reference.jsonl

  # Verify gradients on the tiny model
  attbalance grad-check --template tiny --seeds 0 1 2
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose output")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    config_parser = subparsers.add_parser("config", help="Write a configuration template")
    _add_config_args(config_parser)
    config_parser.add_argument("--output", help="Output file (.yaml or .json)")
    config_parser.set_defaults(func=config_command)

    gen_parser = subparsers.add_parser("gen-data", help="Generate a synthetic dataset")
    _add_config_args(gen_parser)
    gen_parser.add_argument("--output", help="Dataset file path")
    gen_parser.add_argument("--format", choices=["jsonl", "binary"], help="Dataset file format")
    gen_parser.set_defaults(func=gen_data_command)

    train_parser = subparsers.add_parser("train", help="Train a model")
    _add_config_args(train_parser)
    train_parser.add_argument("--dataset", "-d", help="Dataset file (generated inline if omitted)")
    train_parser.add_argument("--mode", choices=["baseline", "attbalance"], help="Training mode")
    train_parser.add_argument("--epochs", type=int, help="Number of epochs")
    train_parser.add_argument("--lr", type=float, help="Learning rate")
    train_parser.add_argument("--resume", help="Resume from this checkpoint")
    train_parser.add_argument("--max-steps", type=int, help="Stop after this many more steps")
    train_parser.set_defaults(func=train_command)

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint")
    eval_parser.add_argument("checkpoint", help="Checkpoint file or run directory")
    eval_parser.add_argument("--dataset", "-d", help="Dataset file")
    eval_parser.add_argument("--split", default="val", choices=["train", "val"])
    eval_parser.add_argument("--layers", help="Comma-separated layers to capture (default: all)")
    eval_parser.add_argument("--output", help="Report path (default: next to the checkpoint)")
    eval_parser.add_argument("--csv", help="Also export per-sample records as CSV")
    eval_parser.add_argument("--curve-mode", default="width", choices=["width", "count"])
    eval_parser.set_defaults(func=eval_command)

    gc_parser = subparsers.add_parser("grad-check", help="Finite-difference gradient check")
    _add_config_args(gc_parser, default_template="tiny")
    gc_parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    gc_parser.add_argument("--tol", type=float, default=1e-4)
    gc_parser.add_argument("--entries", type=int, help="Sampled entries per parameter (default: config)")
    gc_parser.add_argument(
        "--corrupt-op", help="Scale the gradient rule of this operation (negative control)"
    )
    gc_parser.set_defaults(func=grad_check_command)

    compare_parser = subparsers.add_parser("compare", help="Compare two runs")
    compare_parser.add_argument("run_a", help="Checkpoint or run directory A")
    compare_parser.add_argument("run_b", help="Checkpoint or run directory B")
    compare_parser.add_argument("--dataset", "-d", help="Dataset file")
    compare_parser.add_argument("--split", default="val", choices=["train", "val"])
    compare_parser.add_argument("--output", help="Comparison JSON path")
    compare_parser.set_defaults(func=compare_command)

    analyze_parser = subparsers.add_parser("analyze", help="Attention statistics of a checkpoint")
    analyze_parser.add_argument("checkpoint", help="Checkpoint file or run directory")
    analyze_parser.add_argument("--dataset", "-d", help="Dataset file")
    analyze_parser.add_argument("--split", default="val", choices=["train", "val"])
    analyze_parser.add_argument("--layers", help="Comma-separated layers to capture (default: all)")
    analyze_parser.add_argument("--output-dir", "-o", default="analysis", help="Output directory")
    analyze_parser.add_argument("--curve-mode", default="width", choices=["width", "count"])
    analyze_parser.add_argument("--grids", type=int, default=4, help="Samples with attention grids")
    analyze_parser.set_defaults(func=analyze_command)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    setup_logging(args.verbose)

    try:
        return args.func(args)
    except NumericalError as e:
        component = f" [{e.component}]" if e.component else ""
        print(f"Numerical failure{component}: {e}")
        return EXIT_NUMERICAL
    except (AttBalanceError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"Error: {e}")
        if args.verbose:
            import traceback

            traceback.print_exc()
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
