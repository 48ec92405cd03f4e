"""Heard/unheard evaluation protocol and results tables."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from .agents import Agent, GreedyAudioAgent, PolicyAgent, RandomAgent
from .config import EvalConfig, SimConfig
from .errors import ConfigError
from .metrics import EpisodeResult, min_action_count, summarize
from .network import IrcamNetwork
from .sim import OUTCOME_SUCCESS, SPLITS, NavEnv, SoundLibrary, TrajectoryWriter

logger = logging.getLogger(__name__)

TABLE_HEADER = ("method", "split", "SNA", "SR", "SPL")


@dataclass(frozen=True)
class EvalRow:
    method: str
    split: str
    sna: float
    sr: float
    spl: float
    n_episodes: int

    def as_record(self) -> Tuple:
        return (self.method, self.split, self.sna, self.sr, self.spl)


def eval_world_seeds(eval_cfg: EvalConfig, n_episodes: Optional[int] = None) -> List[int]:
    """Held-out world seeds; disjoint from training by config validation."""
    n = eval_cfg.n_episodes if n_episodes is None else n_episodes
    return list(range(eval_cfg.seed_base, eval_cfg.seed_base + n))


def run_episode(
    env: NavEnv,
    agent: Agent,
    world_seed: int,
    writer: Optional[TrajectoryWriter] = None,
) -> EpisodeResult:
    env.reset(world_seed)
    agent.reset(env)
    oracle_actions = min_action_count(env.world, env.start_pose)
    while True:
        action = agent.act(env)
        result = env.step(action)
        if writer is not None:
            writer.write(env.trajectory_record(action, result))
        if result.done:
            break
    return EpisodeResult(
        success=result.outcome == OUTCOME_SUCCESS,
        path_length=env.path_length,
        shortest_path=env.start_distance,
        action_count=env.steps_taken,
        min_action_count=oracle_actions,
    )


def evaluate(
    policy: Union[Agent, IrcamNetwork],
    worlds: Sequence[int],
    split: str,
    sim_cfg: SimConfig,
    library: SoundLibrary,
    seed: int = 0,
    greedy: bool = True,
    trajectory_path: Optional[Union[str, Path]] = None,
) -> Tuple[EvalRow, List[EpisodeResult]]:
    """Run one episode per world seed on ``split`` and summarise it."""
    if split not in SPLITS:
        raise ConfigError(f"Unknown split '{split}'; expected one of {SPLITS}")
    agent = PolicyAgent(policy, greedy=greedy, seed=seed) if isinstance(policy, IrcamNetwork) else policy
    env = NavEnv(sim_cfg, library, split=split, seed=seed)

    results: List[EpisodeResult] = []
    if trajectory_path is not None:
        with TrajectoryWriter(trajectory_path) as writer:
            for world_seed in worlds:
                results.append(run_episode(env, agent, world_seed, writer))
    else:
        for world_seed in worlds:
            results.append(run_episode(env, agent, world_seed))

    scores = summarize(results)
    row = EvalRow(agent.name, split, scores["sna"], scores["sr"], scores["spl"], len(results))
    logger.info(
        "%s/%s over %d episodes: SNA %.3f SR %.3f SPL %.3f",
        row.method, split, row.n_episodes, row.sna, row.sr, row.spl,
    )
    return row, results


def baseline_agents(seed: int = 0) -> List[Agent]:
    return [RandomAgent(seed), GreedyAudioAgent()]


def write_results_table(rows: Sequence[EvalRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TABLE_HEADER)
        for row in rows:
            writer.writerow(row.as_record())
    return path


def format_table(rows: Sequence[EvalRow]) -> str:
    lines = [f"{'method':<14}{'split':<9}{'SNA':>7}{'SR':>7}{'SPL':>7}"]
    for row in rows:
        lines.append(
            f"{row.method:<14}{row.split:<9}{row.sna:>7.3f}{row.sr:>7.3f}{row.spl:>7.3f}"
        )
    return "\n".join(lines)
