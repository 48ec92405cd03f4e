"""Run directories, post-training evaluation and ablation sweeps."""

import csv
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from .config import RunConfig, ablation_variants, write_run_config
from .errors import ConfigError, RunDirectoryError
from .evaluate import EvalRow, baseline_agents, eval_world_seeds, evaluate, write_results_table
from .network import IrcamNetwork
from .ppo import TrainResult, train_loop
from .sim import SPLITS, SoundLibrary

logger = logging.getLogger(__name__)

CONFIG_SNAPSHOT = "config.yaml"
RESULTS_FILE = "results.csv"
EVAL_SUFFIX = "_eval.csv"
ABLATION_FILE = "ablation.csv"
METRIC_NAMES = ("SNA", "SR", "SPL")

Progress = Optional[Callable[[Dict[str, object]], None]]


def prepare_run_dir(run_dir: Path, force: bool = False) -> Path:
    """Create ``run_dir``; an existing non-empty directory needs ``force``."""
    run_dir = Path(run_dir)
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise RunDirectoryError(
                f"Run directory {run_dir} already exists; pass --force to overwrite it"
            )
        logger.warning("overwriting run directory %s", run_dir)
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def check_compatible(network: IrcamNetwork, run_cfg: RunConfig) -> None:
    cfg = network.cfg
    if tuple(cfg.visual_size) != tuple(run_cfg.sim.vision_size) or cfg.audio_bins != run_cfg.sim.audio_bins:
        raise ConfigError(
            f"checkpoint expects vision {tuple(cfg.visual_size)} and {cfg.audio_bins} audio bins, "
            f"simulator provides {tuple(run_cfg.sim.vision_size)} and {run_cfg.sim.audio_bins}"
        )


def evaluate_splits(
    network: IrcamNetwork,
    run_cfg: RunConfig,
    splits: Sequence[str] = SPLITS,
    n_episodes: Optional[int] = None,
    baselines: bool = False,
) -> List[EvalRow]:
    """One row per (method, split) on the held-out worlds."""
    check_compatible(network, run_cfg)
    run_cfg.check_eval_range(run_cfg.eval.n_episodes if n_episodes is None else n_episodes)
    library = SoundLibrary.from_config(run_cfg.sim)
    seeds = eval_world_seeds(run_cfg.eval, n_episodes)
    rows = []
    for split in splits:
        row, _ = evaluate(
            network, seeds, split, run_cfg.sim, library,
            seed=run_cfg.eval.seed, greedy=run_cfg.eval.greedy,
        )
        rows.append(row)
        if baselines:
            for agent in baseline_agents(run_cfg.eval.seed):
                row, _ = evaluate(agent, seeds, split, run_cfg.sim, library, seed=run_cfg.eval.seed)
                rows.append(row)
    return rows


def eval_results_path(checkpoint: Union[str, Path]) -> Path:
    """Default results file for a standalone checkpoint evaluation."""
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.stem + EVAL_SUFFIX)


def run_training(
    run_cfg: RunConfig, force: bool = False, progress: Progress = None
) -> Tuple[TrainResult, List[EvalRow]]:
    """Train into a fresh run directory, then evaluate both splits."""
    run_dir = prepare_run_dir(run_cfg.run_dir(), force)
    write_run_config(run_cfg, run_dir / CONFIG_SNAPSHOT)
    result = train_loop(run_cfg, run_dir, progress)
    rows = evaluate_splits(result.network, run_cfg)
    write_results_table(rows, run_dir / RESULTS_FILE)
    return result, rows


@dataclass
class AblationRow:
    variant: str
    scores: Dict[str, Dict[str, float]]  # split -> metric -> mean over seeds

    def as_record(self) -> List[object]:
        return [self.variant] + [
            self.scores[split][metric] for split in SPLITS for metric in METRIC_NAMES
        ]


def ablation_header() -> List[str]:
    return ["variant"] + [f"{split}_{metric}" for split in SPLITS for metric in METRIC_NAMES]


def _row_scores(row: EvalRow) -> Dict[str, float]:
    return {"SNA": row.sna, "SR": row.sr, "SPL": row.spl}


def run_ablation(
    run_cfg: RunConfig, n_seeds: int = 1, force: bool = False, progress: Progress = None
) -> List[AblationRow]:
    """Train full, w/o RT, w/o PE and w/o EN under identical budgets for
    ``n_seeds`` consecutive seeds and average their held-out scores."""
    if n_seeds < 1:
        raise ConfigError(f"--seeds must be at least 1, got {n_seeds}")
    root = prepare_run_dir(run_cfg.run_dir(), force)
    write_run_config(run_cfg, root / CONFIG_SNAPSHOT)

    rows = []
    for name, variant in ablation_variants(run_cfg.network):
        totals = {split: {metric: 0.0 for metric in METRIC_NAMES} for split in SPLITS}
        for offset in range(n_seeds):
            seeded = run_cfg.model_copy(
                update={
                    "run_name": f"{run_cfg.run_name}/{name}_seed{offset}",
                    "network": variant.model_copy(update={"seed": variant.seed + offset}),
                    "train": run_cfg.train.model_copy(update={"seed": run_cfg.train.seed + offset}),
                }
            )
            run_dir = prepare_run_dir(root / f"{name}_seed{offset}")
            write_run_config(seeded, run_dir / CONFIG_SNAPSHOT)
            logger.info("ablation: training %s (seed offset %d)", name, offset)
            result = train_loop(seeded, run_dir, progress)
            for row in evaluate_splits(result.network, seeded):
                for metric, value in _row_scores(row).items():
                    totals[row.split][metric] += value / n_seeds
        rows.append(AblationRow(name, totals))
    write_ablation_table(rows, root / ABLATION_FILE)
    return rows


def write_ablation_table(rows: Sequence[AblationRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ablation_header())
        for row in rows:
            writer.writerow(row.as_record())
    return path
