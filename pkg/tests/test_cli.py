import math
from unittest.mock import patch

import yaml
from click.testing import CliRunner

from src.ircam_nav.checkpoint import write_checkpoint
from src.ircam_nav.cli import cli
from src.ircam_nav.config import IrcamConfig
from src.ircam_nav.errors import DivergenceError, NonFiniteError
from src.ircam_nav.evaluate import EvalRow
from src.ircam_nav.network import IrcamNetwork
from src.ircam_nav.ppo import TrainResult

from .conftest import TOY_NETWORK


def fake_training(run_cfg, run_dir, progress=None):
    network = IrcamNetwork(run_cfg.network)
    checkpoint = write_checkpoint(run_dir / "checkpoints" / "ckpt_1.ircm", network)
    return TrainResult(network, 1, 1, checkpoint)


FAKE_ROWS = [EvalRow("ircam", "heard", 0.1, 0.2, 0.1, 2), EvalRow("ircam", "unheard", 0.0, 0.0, 0.0, 2)]


class TestCLI:
    """Commands, options and exit codes."""

    def setup_method(self):
        self.runner = CliRunner()

    def test_cli_help(self):
        result = self.runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        for command in ("train", "eval", "ablate", "export-attn", "world"):
            assert command in result.output

    def test_version(self):
        result = self.runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert "version" in result.output

    def test_missing_config_exits_2(self, tmp_path):
        """A config path that does not exist is a configuration failure."""
        missing = tmp_path / "nope.yaml"
        result = self.runner.invoke(cli, ["train", "--config", str(missing)])
        assert result.exit_code == 2
        assert "nope.yaml" in result.output

    def test_invalid_override_exits_2(self):
        result = self.runner.invoke(cli, ["world", "--set", "sim.wall_density=0.9"])
        assert result.exit_code == 2
        assert "wall_density" in result.output

    @patch("src.ircam_nav.experiment.evaluate_splits", return_value=FAKE_ROWS)
    @patch("src.ircam_nav.experiment.train_loop", side_effect=fake_training)
    def test_train_snapshot_records_overrides(self, mock_train, mock_eval, tmp_path):
        """--set values reach the run directory's config snapshot."""
        result = self.runner.invoke(
            cli,
            ["train", "--set", f"output_dir={tmp_path}", "--set", "train.seed=7", "--quiet"],
        )
        assert result.exit_code == 0, result.output
        snapshot = yaml.safe_load((tmp_path / "ircam" / "config.yaml").read_text())
        assert snapshot["train"]["seed"] == 7
        assert (tmp_path / "ircam" / "results.csv").exists()
        mock_train.assert_called_once()

    @patch("src.ircam_nav.experiment.evaluate_splits", return_value=FAKE_ROWS)
    @patch("src.ircam_nav.experiment.train_loop", side_effect=fake_training)
    def test_existing_run_directory_exits_3(self, mock_train, mock_eval, tmp_path):
        run_dir = tmp_path / "ircam"
        run_dir.mkdir()
        (run_dir / "metrics.jsonl").write_text("{}\n")
        args = ["train", "--set", f"output_dir={tmp_path}", "--quiet"]
        result = self.runner.invoke(cli, args)
        assert result.exit_code == 3
        assert "--force" in result.output
        assert self.runner.invoke(cli, args + ["--force"]).exit_code == 0

    @patch("src.ircam_nav.experiment.train_loop", side_effect=DivergenceError("value loss", math.nan))
    def test_divergence_exits_4(self, mock_train, tmp_path):
        result = self.runner.invoke(cli, ["train", "--set", f"output_dir={tmp_path}"])
        assert result.exit_code == 4
        assert "value loss" in result.output

    def test_truncated_checkpoint_exits_3(self, tmp_path):
        path = write_checkpoint(tmp_path / "model.ircm", IrcamNetwork(IrcamConfig(**TOY_NETWORK)))
        path.write_bytes(path.read_bytes()[:100])
        result = self.runner.invoke(cli, ["eval", str(path), "-n", "1"])
        assert result.exit_code == 3
        assert "byte offset" in result.output

    def test_missing_checkpoint_exits_3(self, tmp_path):
        result = self.runner.invoke(cli, ["eval", str(tmp_path / "absent.ircm")])
        assert result.exit_code == 3

    def test_eval_writes_results(self, tmp_path):
        path = write_checkpoint(tmp_path / "model.ircm", IrcamNetwork(IrcamConfig(**TOY_NETWORK)))
        result = self.runner.invoke(
            cli,
            ["eval", str(path), "-n", "2", "--split", "heard", "--baselines",
             "--set", "sim.max_episode_steps=10"],
        )
        assert result.exit_code == 0, result.output
        lines = (tmp_path / "model_eval.csv").read_text().splitlines()
        assert lines[0] == "method,split,SNA,SR,SPL"
        assert [line.split(",")[0] for line in lines[1:]] == ["ircam", "random", "greedy-audio"]

    def test_eval_incompatible_simulator_exits_2(self, tmp_path):
        path = write_checkpoint(tmp_path / "model.ircm", IrcamNetwork(IrcamConfig(**TOY_NETWORK)))
        result = self.runner.invoke(
            cli,
            ["eval", str(path), "--set", "sim.audio_bins=16", "--set", "network.audio_bins=16",
             "--set", "network.audio_patch=4"],
        )
        assert result.exit_code == 2

    def test_export_attn(self, tmp_path):
        path = write_checkpoint(tmp_path / "model.ircm", IrcamNetwork(IrcamConfig(**TOY_NETWORK)))
        out_dir = tmp_path / "attn"
        result = self.runner.invoke(
            cli,
            ["export-attn", str(path), "--world-seed", "1000001", "--out-dir", str(out_dir),
             "--max-steps", "2"],
        )
        assert result.exit_code == 0, result.output
        assert (out_dir / "cross_modal_summary.csv").exists()
        assert (out_dir / "step000_iter1_head0.csv").exists()

    def test_world_command(self):
        result = self.runner.invoke(cli, ["world", "--seed", "3"])
        assert result.exit_code == 0
        lines = result.output.splitlines()
        assert lines[0].startswith("size=8")
        assert sum(line.count("S") for line in lines[1:]) == 1

    def test_eval_keeps_existing_results(self, tmp_path):
        """A second eval refuses to replace the results file unless --force is given."""
        path = write_checkpoint(tmp_path / "model.ircm", IrcamNetwork(IrcamConfig(**TOY_NETWORK)))
        results = tmp_path / "model_eval.csv"
        results.write_text("keep me\n")
        args = ["eval", str(path), "-n", "1", "--split", "heard", "--set", "sim.max_episode_steps=5"]
        result = self.runner.invoke(cli, args)
        assert result.exit_code == 3
        assert "--force" in result.output
        assert results.read_text() == "keep me\n"
        assert self.runner.invoke(cli, args + ["--force"]).exit_code == 0
        assert results.read_text().startswith("method,split,")

    def test_eval_does_not_touch_run_results(self, tmp_path):
        """Evaluating a run's checkpoint leaves the run's own results.csv alone."""
        checkpoints = tmp_path / "checkpoints"
        path = write_checkpoint(checkpoints / "ckpt_1.ircm", IrcamNetwork(IrcamConfig(**TOY_NETWORK)))
        (checkpoints / "results.csv").write_text("training results\n")
        result = self.runner.invoke(
            cli, ["eval", str(path), "-n", "1", "--split", "heard", "--set", "sim.max_episode_steps=5"]
        )
        assert result.exit_code == 0, result.output
        assert (checkpoints / "results.csv").read_text() == "training results\n"
        assert (checkpoints / "ckpt_1_eval.csv").exists()

    def test_eval_episode_override_must_stay_held_out(self, tmp_path):
        """-n may not stretch the evaluation seeds into the training range."""
        path = write_checkpoint(tmp_path / "model.ircm", IrcamNetwork(IrcamConfig(**TOY_NETWORK)))
        result = self.runner.invoke(
            cli,
            ["eval", str(path), "-n", "11",
             "--set", "sim.train_world_seeds=[1000010, 2000000]",
             "--set", "eval.n_episodes=10", "--set", "train.eval_episodes=10"],
        )
        assert result.exit_code == 2
        assert "overlap the training seeds" in result.output
        assert not (tmp_path / "model_eval.csv").exists()

    def test_nan_checkpoint_exits_3(self, tmp_path):
        network = IrcamNetwork(IrcamConfig(**TOY_NETWORK))
        network.params["decoder.queries"].data[0, 0] = math.nan
        path = write_checkpoint(tmp_path / "model.ircm", network)
        result = self.runner.invoke(cli, ["eval", str(path), "-n", "1"])
        assert result.exit_code == 3
        assert "non-finite" in result.output

    @patch(
        "src.ircam_nav.experiment.train_loop",
        side_effect=NonFiniteError("matmul produced non-finite values", math.inf),
    )
    def test_non_finite_forward_exits_4(self, mock_train, tmp_path):
        result = self.runner.invoke(cli, ["train", "--set", f"output_dir={tmp_path}"])
        assert result.exit_code == 4
        assert "matmul" in result.output
