"""Command-line interface for IRCAM audio-visual navigation."""

import contextlib
import importlib.metadata
import logging
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple

import click

from .attention_export import export_attention
from .checkpoint import load_network
from .config import load_run_config
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    NonFiniteError,
    RunDirectoryError,
)
from .evaluate import format_table, write_results_table
from .experiment import (
    ABLATION_FILE,
    ablation_header,
    check_compatible,
    evaluate_splits,
    eval_results_path,
    run_ablation,
    run_training,
)
from .sim import SPLITS, SoundLibrary, world_generate


def get_version():
    """Get version from package metadata."""
    try:
        return importlib.metadata.version("ircam-nav")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


class ConfigFailure(click.ClickException):
    exit_code = 2


class ArtifactFailure(click.ClickException):
    exit_code = 3


class DivergenceFailure(click.ClickException):
    exit_code = 4


@contextlib.contextmanager
def cli_errors() -> Iterator[None]:
    """Translate library failures into exit codes."""
    try:
        yield
    except ConfigError as e:
        raise ConfigFailure(str(e)) from e
    except (CheckpointError, RunDirectoryError, OSError) as e:
        raise ArtifactFailure(str(e)) from e
    except (DivergenceError, NonFiniteError) as e:
        raise DivergenceFailure(str(e)) from e


def _echo_progress(record: Dict[str, object]) -> None:
    line = (
        f"update {record['update_index']:>4}  steps {record['agent_steps']:>8}  "
        f"reward {record['mean_reward']:+.4f}  entropy {record['entropy']:.3f}"
    )
    if record["sr_heard"] is not None:
        line += f"  SR heard {record['sr_heard']:.2f} unheard {record['sr_unheard']:.2f}"
    click.echo(line)


config_option = click.option(
    "--config",
    "-c",
    "config_path",
    type=click.Path(dir_okay=False),
    help="Run config file (YAML or JSON); defaults apply when omitted",
)
set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="SECTION.KEY=VALUE",
    help="Override one config value, e.g. --set train.seed=7",
)


@click.group()
@click.version_option(version=get_version())
@click.option("--verbose", "-v", count=True, help="Increase log verbosity (-v, -vv)")
def cli(verbose: int):
    """IRCAM audio-visual navigation.

    Train, evaluate and inspect iterative residual cross-attention agents in a
    grid-world audio-visual simulator.
    """
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


@cli.command()
@config_option
@set_option
@click.option("--force", is_flag=True, help="Overwrite an existing run directory")
@click.option("--quiet", "-q", is_flag=True, help="Do not print per-update progress")
def train(config_path: Optional[str], overrides: Tuple[str, ...], force: bool, quiet: bool):
    """Train an IRCAM agent with PPO."""
    with cli_errors():
        run_cfg = load_run_config(config_path, overrides)
        click.echo(f"Run directory: {run_cfg.run_dir()}")
        result, rows = run_training(run_cfg, force=force, progress=None if quiet else _echo_progress)
        click.echo(f"Trained {result.agent_steps} agent steps; checkpoint {result.final_checkpoint}")
        click.echo(format_table(rows))


@cli.command("eval")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.option(
    "--split",
    type=click.Choice(SPLITS + ("both",)),
    default="both",
    show_default=True,
    help="Evaluation split",
)
@click.option("--n-episodes", "-n", type=int, help="Episodes per split (default: eval.n_episodes)")
@click.option("--baselines", is_flag=True, help="Also evaluate the random and greedy-audio agents")
@click.option(
    "--output", "-o", type=click.Path(dir_okay=False),
    help="Results CSV path (default: <checkpoint>_eval.csv)",
)
@click.option("--force", is_flag=True, help="Overwrite an existing results file")
@config_option
@set_option
def evaluate_command(
    checkpoint: str,
    split: str,
    n_episodes: Optional[int],
    baselines: bool,
    output: Optional[str],
    force: bool,
    config_path: Optional[str],
    overrides: Tuple[str, ...],
):
    """Evaluate a checkpoint on held-out worlds."""
    with cli_errors():
        out = Path(output) if output else eval_results_path(checkpoint)
        if out.exists() and not force:
            raise RunDirectoryError(f"{out} already exists; pass --force to overwrite it")
        run_cfg = load_run_config(config_path, overrides)
        network = load_network(checkpoint)
        splits = SPLITS if split == "both" else (split,)
        rows = evaluate_splits(network, run_cfg, splits, n_episodes, baselines)
        click.echo(format_table(rows))
        write_results_table(rows, out)
        click.echo(f"Results written to {out}")


@cli.command()
@config_option
@set_option
@click.option("--seeds", type=int, default=1, show_default=True, help="Training seeds per variant")
@click.option("--force", is_flag=True, help="Overwrite an existing run directory")
def ablate(config_path: Optional[str], overrides: Tuple[str, ...], seeds: int, force: bool):
    """Train and compare full, w/o RT, w/o PE and w/o EN variants."""
    with cli_errors():
        run_cfg = load_run_config(config_path, overrides)
        rows = run_ablation(run_cfg, n_seeds=seeds, force=force)
        click.echo("  ".join(ablation_header()))
        for row in rows:
            values = [f"{v:.3f}" for v in row.as_record()[1:]]
            click.echo("  ".join([row.variant] + values))
        click.echo(f"Table written to {run_cfg.run_dir() / ABLATION_FILE}")


@cli.command("export-attn")
@click.argument("checkpoint", type=click.Path(dir_okay=False))
@click.option("--world-seed", type=int, required=True, help="World to run the episode in")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True, help="Output directory")
@click.option("--split", type=click.Choice(SPLITS), default="heard", show_default=True)
@click.option("--max-steps", type=int, help="Stop exporting after this many steps")
@config_option
@set_option
def export_attn(
    checkpoint: str,
    world_seed: int,
    out_dir: str,
    split: str,
    max_steps: Optional[int],
    config_path: Optional[str],
    overrides: Tuple[str, ...],
):
    """Write decoder attention tables and a cross-modal summary for one episode."""
    with cli_errors():
        run_cfg = load_run_config(config_path, overrides)
        network = load_network(checkpoint)
        check_compatible(network, run_cfg)
        library = SoundLibrary.from_config(run_cfg.sim)
        export = export_attention(
            network, world_seed, out_dir, run_cfg.sim, library, split=split, max_steps=max_steps
        )
        click.echo(
            f"Wrote {len(export.table_files)} attention tables over {export.steps} steps "
            f"and {export.summary_file}"
        )


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True, help="World seed")
@click.option("--split", type=click.Choice(SPLITS), default="heard", show_default=True)
@config_option
@set_option
def world(seed: int, split: str, config_path: Optional[str], overrides: Tuple[str, ...]):
    """Print a generated world as text."""
    with cli_errors():
        sim = load_run_config(config_path, overrides).sim
        library = SoundLibrary.from_config(sim)
        click.echo(world_generate(seed, sim.world_size, sim.wall_density, library.ids(split)).to_text())


def main():
    """Main entry point for the CLI."""
    cli()


if __name__ == "__main__":
    main()
