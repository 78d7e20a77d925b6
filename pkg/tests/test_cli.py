"""
Tests for the attbalance command-line interface.
"""

import json
import tempfile
from pathlib import Path

import pytest
import yaml

from attbalance.cli import build_parser, main, parse_overrides


class TestOverrideParsing:
    """Test KEY=VALUE parsing."""

    def test_values_are_yaml_scalars(self):
        """Test numbers, booleans and lists are decoded."""
        overrides = parse_overrides(
            ["attbalance.momentum=0.99", "attbalance.use_mrc=false", "attbalance.applied_layers=[1, 2]"]
        )
        assert overrides == {
            "attbalance.momentum": 0.99,
            "attbalance.use_mrc": False,
            "attbalance.applied_layers": [1, 2],
        }

    def test_missing_separator(self):
        """Test a pair without '='."""
        with pytest.raises(ValueError):
            parse_overrides(["seed"])


class TestCommands:
    """Test each command end to end on the tiny template."""

    def test_config_list(self, capsys):
        """Test listing templates."""
        assert main(["config", "--template", "list"]) == 0
        out = capsys.readouterr().out
        assert "tiny" in out
        assert "baseline" in out

    def test_config_write(self):
        """Test writing a template with overrides."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            output = Path(tmp_dir) / "cfg.yaml"
            code = main(
                ["config", "--template", "tiny", "--set", "attbalance.momentum=0.95", "--seed", "4",
                 "--output", str(output)]
            )
            assert code == 0
            data = yaml.safe_load(output.read_text())
        assert data["attbalance"]["momentum"] == 0.95
        assert data["seed"] == 4

    def test_gen_train_eval_analyze(self, capsys):
        """Test the full pipeline through the command line."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            tmp = Path(tmp_dir)
            data = tmp / "data.jsonl"
            assert main(["gen-data", "--template", "tiny", "--output", str(data)]) == 0
            assert data.exists()

            run = tmp / "run"
            assert main(["train", "--template", "tiny", "--dataset", str(data), "-o", str(run)]) == 0
            assert (run / "checkpoints" / "final.ckpt").exists()
            assert (run / "config.yaml").exists()
            assert len((run / "metrics.jsonl").read_text().splitlines()) == 8

            assert main(["eval", str(run), "--dataset", str(data), "--layers", "1",
                         "--csv", str(tmp / "records.csv")]) == 0
            report = json.loads((run / "checkpoints" / "report.json").read_text())
            assert report["layers"] == [1]
            assert (tmp / "records.csv").exists()

            out_dir = tmp / "analysis"
            assert main(["analyze", str(run), "--dataset", str(data), "-o", str(out_dir),
                         "--grids", "2"]) == 0
            grids = json.loads((out_dir / "attention_grids.json").read_text())
            assert len(grids) == 2
            assert (out_dir / "records.csv").exists()
        assert "Histogram skipped" in capsys.readouterr().out

    def test_train_resume_and_compare(self):
        """Test resuming a run and comparing it with a baseline."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            tmp = Path(tmp_dir)
            run = tmp / "run"
            base = tmp / "base"
            assert main(["train", "-t", "tiny", "-o", str(run), "--max-steps", "3"]) == 0
            assert main(["train", "--resume", str(run / "checkpoints" / "final.ckpt"),
                         "-o", str(run), "--max-steps", "2"]) == 0
            lines = (run / "metrics.jsonl").read_text().splitlines()
            assert [json.loads(line)["step"] for line in lines] == [0, 1, 2, 3, 4]

            assert main(["train", "-t", "tiny", "--mode", "baseline", "-o", str(base),
                         "--max-steps", "3"]) == 0
            output = tmp / "cmp.json"
            assert main(["compare", str(base), str(run), "--output", str(output)]) == 0
            result = json.loads(output.read_text())
        assert result["a"]["step"] == 3
        assert result["b"]["step"] == 5

    def test_grad_check(self, capsys):
        """Test passing and deliberately broken gradient checks."""
        assert main(["grad-check", "--seeds", "0", "--entries", "3"]) == 0
        assert capsys.readouterr().out.strip().endswith("PASS")
        assert main(["grad-check", "--seeds", "0", "--entries", "3", "--corrupt-op", "softmax"]) == 2
        assert capsys.readouterr().out.strip().endswith("FAIL")


class TestErrors:
    """Test exit codes of failing invocations."""

    def test_no_command(self):
        """Test running without a command prints help."""
        assert main([]) == 1

    def test_unknown_template(self):
        """Test an unknown template name."""
        assert main(["config", "--template", "huge"]) == 1

    def test_bad_override(self):
        """Test malformed and unknown overrides."""
        assert main(["config", "--template", "tiny", "--set", "seed"]) == 1
        assert main(["config", "--template", "tiny", "--set", "attbalance.nope=1"]) == 1

    def test_invalid_training_config(self):
        """Test training refuses an invalid configuration."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            code = main(["train", "-t", "tiny", "-o", tmp_dir, "--set", "attbalance.momentum=1.5"])
        assert code == 1

    def test_missing_checkpoint(self):
        """Test evaluating a checkpoint that does not exist."""
        with tempfile.TemporaryDirectory() as tmp_dir:
            assert main(["eval", str(Path(tmp_dir) / "missing.ckpt")]) == 1

    def test_unknown_argument(self):
        """Test argparse usage errors exit with code 1."""
        with pytest.raises(SystemExit) as excinfo:
            main(["train", "--no-such-flag"])
        assert excinfo.value.code == 1

    def test_parser_commands(self):
        """Test every command is registered."""
        parser = build_parser()
        invocations = {
            "config": [],
            "gen-data": [],
            "train": [],
            "eval": ["run"],
            "analyze": ["run"],
            "grad-check": [],
            "compare": ["run_a", "run_b"],
        }
        for command, positional in invocations.items():
            assert parser.parse_args([command] + positional).command == command
