import csv
import json

import yaml
from click.testing import CliRunner

from src.ircam_nav.cli import cli
from src.ircam_nav.config import dump_run_config


class TestIntegration:
    """Train, evaluate and inspect a toy agent through the command line."""

    def setup_method(self):
        self.runner = CliRunner()

    def _write_config(self, tmp_path, run_cfg):
        path = tmp_path / "config.yaml"
        path.write_text(dump_run_config(run_cfg))
        return path

    def test_train_eval_export(self, tmp_path, tiny_run_config):
        config = self._write_config(tmp_path, tiny_run_config)
        result = self.runner.invoke(cli, ["train", "--config", str(config)])
        assert result.exit_code == 0, result.output
        assert "update    1" in result.output

        run_dir = tmp_path / "runs" / "tiny"
        assert yaml.safe_load((run_dir / "config.yaml").read_text())["run_name"] == "tiny"
        records = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert [r["update_index"] for r in records] == [0, 1]
        with open(run_dir / "results.csv") as f:
            rows = list(csv.DictReader(f))
        assert {row["split"] for row in rows} == {"heard", "unheard"}

        checkpoint = run_dir / "checkpoints" / "ckpt_32.ircm"
        out = tmp_path / "eval.csv"
        result = self.runner.invoke(
            cli, ["eval", str(checkpoint), "--config", str(config), "--split", "unheard", "-o", str(out)]
        )
        assert result.exit_code == 0, result.output
        assert out.read_text().splitlines()[1].startswith("ircam,unheard,")

        attn = tmp_path / "attn"
        result = self.runner.invoke(
            cli,
            ["export-attn", str(checkpoint), "--config", str(config), "--world-seed", "1000000",
             "--out-dir", str(attn)],
        )
        assert result.exit_code == 0, result.output
        assert (attn / "cross_modal_summary.csv").exists()

    def test_rerun_is_reproducible(self, tmp_path, tiny_run_config):
        """Retraining with --force reproduces the final checkpoint byte for byte."""
        config = self._write_config(tmp_path, tiny_run_config)
        checkpoint = tmp_path / "runs" / "tiny" / "checkpoints" / "ckpt_32.ircm"

        assert self.runner.invoke(cli, ["train", "-c", str(config), "-q"]).exit_code == 0
        first = checkpoint.read_bytes()
        assert self.runner.invoke(cli, ["train", "-c", str(config), "-q"]).exit_code == 3
        assert self.runner.invoke(cli, ["train", "-c", str(config), "-q", "--force"]).exit_code == 0
        assert checkpoint.read_bytes() == first

    def test_ablation_sweep(self, tmp_path, tiny_run_config):
        config = self._write_config(tmp_path, tiny_run_config)
        result = self.runner.invoke(
            cli, ["ablate", "-c", str(config), "--set", "train.total_steps=16"]
        )
        assert result.exit_code == 0, result.output
        root = tmp_path / "runs" / "tiny"
        with open(root / "ablation.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0][:4] == ["variant", "heard_SNA", "heard_SR", "heard_SPL"]
        assert [row[0] for row in rows[1:]] == ["full", "wo_rt", "wo_pe", "wo_en"]
        assert (root / "wo_en_seed0" / "checkpoints" / "ckpt_16.ircm").exists()
