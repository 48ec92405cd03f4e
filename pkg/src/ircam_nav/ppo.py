"""PPO training: rollouts, generalized advantage estimation and clipped updates.

Rollouts are collected from an immutable ``ParameterSnapshot``; only the
trainer mutates parameters, between collection phases. This module runs a
single worker, stepping every environment in order, which keeps training
bitwise reproducible for a fixed config.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from . import tensor as T
from .checkpoint import checkpoint_name, write_checkpoint
from .config import RunConfig, TrainConfig
from .errors import ContractError, DivergenceError, NonFiniteError
from .evaluate import eval_world_seeds, evaluate
from .network import (
    IrcamNetwork,
    ParameterSnapshot,
    ablation_apply,
    log_probabilities,
    sample_actions,
    stack_observations,
)
from .optim import AdamState, adam_step, clip_grad_norm
from .sim import OUTCOME_SUCCESS, NavEnv, SoundLibrary

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_DIR = "checkpoints"


@dataclass
class RolloutBuffer:
    """Per-step arrays shaped ``[horizon, n_envs, ...]``."""

    visual: np.ndarray
    audio: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray
    episodes_finished: int = 0
    episodes_succeeded: int = 0

    def __post_init__(self):
        steps = self.actions.shape
        for name in ("visual", "audio", "log_probs", "values", "rewards", "dones"):
            if getattr(self, name).shape[:2] != steps:
                raise ContractError(
                    f"rollout buffer field {name} has shape {getattr(self, name).shape}, "
                    f"expected leading {steps}"
                )
        if self.last_values.shape != steps[1:]:
            raise ContractError(f"last_values shape {self.last_values.shape} vs {steps[1:]}")
        if not (np.all(np.isfinite(self.values)) and np.all(np.isfinite(self.last_values))):
            raise NonFiniteError("rollout buffer holds non-finite value estimates")

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    @property
    def n_envs(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return self.actions.size


def _policy_step(network: IrcamNetwork, envs: Sequence[NavEnv]) -> Tuple[np.ndarray, np.ndarray]:
    with T.no_grad():
        output, _ = network.policy(stack_observations([env.observation for env in envs]))
    return output.action_logits.data, output.state_value.data


def collect_rollouts(
    snapshot: ParameterSnapshot,
    envs: Sequence[NavEnv],
    horizon: int,
    rng: np.random.Generator,
) -> RolloutBuffer:
    """Step every env ``horizon`` times with actions sampled from the policy;
    finished episodes are reset in place."""
    network = snapshot.to_network()
    for env in envs:
        if env.observation is None:
            env.reset()

    steps: Dict[str, List[np.ndarray]] = {
        k: [] for k in ("visual", "audio", "actions", "log_probs", "values", "rewards", "dones")
    }
    finished = succeeded = 0
    for _ in range(horizon):
        visual, audio = stack_observations([env.observation for env in envs])
        logits, values = _policy_step(network, envs)
        actions = sample_actions(logits, rng)
        rewards = np.zeros(len(envs))
        dones = np.zeros(len(envs), dtype=bool)
        for i, env in enumerate(envs):
            result = env.step(int(actions[i]))
            rewards[i] = result.reward
            dones[i] = result.done
            if result.done:
                finished += 1
                succeeded += int(result.outcome == OUTCOME_SUCCESS)
                env.reset()
        steps["visual"].append(visual)
        steps["audio"].append(audio)
        steps["actions"].append(actions)
        steps["log_probs"].append(log_probabilities(logits, actions))
        steps["values"].append(values.astype(np.float64))
        steps["rewards"].append(rewards)
        steps["dones"].append(dones)

    _, last_values = _policy_step(network, envs)
    return RolloutBuffer(
        **{k: np.stack(v) for k, v in steps.items()},
        last_values=last_values.astype(np.float64),
        episodes_finished=finished,
        episodes_succeeded=succeeded,
    )


def gae_advantages(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_values: np.ndarray,
    gamma: float,
    lam: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Backward recursion ``A_t = delta_t + gamma * lam * (1 - done_t) * A_{t+1}``.

    ``delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t`` with
    ``V_horizon = last_values``. Returns ``(advantages, returns)``.
    """
    horizon = rewards.shape[0]
    advantages = np.zeros(rewards.shape, dtype=np.float64)
    running = np.zeros(rewards.shape[1:], dtype=np.float64)
    next_values = np.asarray(last_values, dtype=np.float64)
    for t in reversed(range(horizon)):
        alive = 1.0 - dones[t].astype(np.float64)
        delta = rewards[t] + gamma * next_values * alive - values[t]
        running = delta + gamma * lam * alive * running
        advantages[t] = running
        next_values = values[t]
    return advantages, advantages + values


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    return gae_advantages(
        buffer.rewards, buffer.values, buffer.dones, buffer.last_values, gamma, lam
    )


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    centered = advantages - advantages.mean()
    return centered / (centered.std() + 1e-8)


@dataclass
class PPOBatch:
    """Flattened training samples."""

    visual: np.ndarray
    audio: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, index: np.ndarray) -> "PPOBatch":
        return PPOBatch(
            self.visual[index],
            self.audio[index],
            self.actions[index],
            self.old_log_probs[index],
            self.advantages[index],
            self.returns[index],
        )


def prepare_batch(buffer: RolloutBuffer, cfg: TrainConfig) -> PPOBatch:
    advantages, returns = compute_gae(buffer, cfg.gamma, cfg.gae_lambda)
    n = len(buffer)
    return PPOBatch(
        visual=buffer.visual.reshape((n,) + buffer.visual.shape[2:]),
        audio=buffer.audio.reshape((n,) + buffer.audio.shape[2:]),
        actions=buffer.actions.reshape(n).astype(np.int64),
        old_log_probs=buffer.log_probs.reshape(n),
        advantages=normalize_advantages(advantages.reshape(n)),
        returns=returns.reshape(n),
    )


R = TypeVar("R")


def _guarded(term: str, compute: Callable[[], R]) -> R:
    try:
        return compute()
    except NonFiniteError as e:
        raise DivergenceError(term, e.value) from e


def ppo_loss(
    network: IrcamNetwork, batch: PPOBatch, cfg: TrainConfig
) -> Tuple[T.Tensor, Dict[str, float]]:
    """Clipped surrogate + value regression - entropy bonus, with diagnostics."""
    output, _ = _guarded("forward pass", lambda: network.policy((batch.visual, batch.audio)))
    log_pi = _guarded("log-probabilities", lambda: T.log_softmax_last_dim(output.action_logits))
    log_prob = _guarded("log-probabilities", lambda: T.take_last(log_pi, batch.actions))
    ratio = _guarded(
        "probability ratio",
        lambda: T.exp(T.sub(log_prob, T.constant(batch.old_log_probs))),
    )

    def policy_term() -> Tuple[T.Tensor, T.Tensor, T.Tensor]:
        advantages = T.constant(batch.advantages)
        unclipped = T.mul(ratio, advantages)
        clipped = T.mul(T.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio), advantages)
        return T.scale(T.mean(T.minimum(unclipped, clipped)), -1.0), unclipped, clipped

    policy_loss, unclipped, clipped = _guarded("policy loss", policy_term)

    def value_term() -> T.Tensor:
        error = T.sub(output.state_value, T.constant(batch.returns))
        return T.mean(T.mul(error, error))

    value_loss = _guarded("value loss", value_term)
    entropy = _guarded(
        "entropy",
        lambda: T.scale(
            T.mean(T.sum(T.mul(T.exp(log_pi), log_pi), axis=-1)), -1.0
        ),
    )
    total = _guarded(
        "total loss",
        lambda: T.sub(
            T.add(policy_loss, T.scale(value_loss, cfg.value_coef)),
            T.scale(entropy, cfg.entropy_coef),
        ),
    )

    log_ratio = log_prob.data.astype(np.float64) - batch.old_log_probs
    stats = {
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "kl": float(np.mean(-log_ratio)),
        "clip_frac": float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip_ratio)),
        "surrogate_unclipped": float(np.mean(unclipped.data)),
        "surrogate_clipped": float(np.mean(clipped.data)),
        "total_loss": total.item(),
    }
    return total, stats


def ppo_update(
    network: IrcamNetwork,
    adam: AdamState,
    buffer: RolloutBuffer,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Dict[str, float]:
    """``epochs_per_update`` passes over shuffled minibatches, one Adam step
    each. Returns the mean of every diagnostic over all minibatches."""
    batch = prepare_batch(buffer, cfg)
    totals: Dict[str, float] = {}
    n_steps = 0
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(len(batch))
        for start in range(0, len(batch), cfg.minibatch_size):
            T.zero_grads(network.params)
            loss, stats = ppo_loss(network, batch.subset(order[start : start + cfg.minibatch_size]), cfg)
            T.backward(loss)
            norm = clip_grad_norm(network.params, cfg.max_grad_norm)
            if not math.isfinite(norm):
                raise DivergenceError("gradient norm", norm)
            adam_step(network.params, adam)
            for key, value in stats.items():
                totals[key] = totals.get(key, 0.0) + value
            n_steps += 1
    return {key: value / n_steps for key, value in totals.items()}


# training loop


def _env_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class TrainResult:
    network: IrcamNetwork
    agent_steps: int
    updates: int
    final_checkpoint: Path
    records: List[Dict[str, object]] = field(default_factory=list)


def _eval_success(
    network: IrcamNetwork, run_cfg: RunConfig, library: SoundLibrary, split: str
) -> float:
    seeds = eval_world_seeds(run_cfg.eval, run_cfg.train.eval_episodes)
    row, _ = evaluate(network, seeds, split, run_cfg.sim, library, seed=run_cfg.eval.seed)
    return row.sr


def train_loop(
    run_cfg: RunConfig,
    run_dir: Path,
    progress: Optional[Callable[[Dict[str, object]], None]] = None,
) -> TrainResult:
    """Collect, estimate advantages and update until ``total_steps`` agent
    steps are consumed; metrics go to ``metrics.jsonl`` and checkpoints to
    ``checkpoints/``."""
    cfg = run_cfg.train
    run_dir = Path(run_dir)
    checkpoint_dir = run_dir / CHECKPOINT_DIR
    checkpoint_dir.mkdir(parents=True, exist_ok=True)

    library = SoundLibrary.from_config(run_cfg.sim)
    network = ablation_apply(run_cfg.network)
    adam = AdamState(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    envs = [
        NavEnv(run_cfg.sim, library, split="heard", seed=_env_seed(cfg.seed, i))
        for i in range(cfg.n_envs)
    ]
    steps_per_update = cfg.horizon * cfg.n_envs
    n_updates = math.ceil(cfg.total_steps / steps_per_update)
    logger.info(
        "training %d parameters for %d updates of %d steps",
        network.parameter_count(), n_updates, steps_per_update,
    )

    agent_steps = 0
    next_checkpoint = cfg.checkpoint_interval
    last_checkpoint: Optional[Path] = None
    records: List[Dict[str, object]] = []
    with open(run_dir / METRICS_FILE, "w") as metrics_file:
        for update in range(n_updates):
            agent_steps += steps_per_update
            try:
                buffer = _guarded(
                    "rollout", lambda: collect_rollouts(network.snapshot(), envs, cfg.horizon, rng)
                )
                stats = _guarded("update", lambda: ppo_update(network, adam, buffer, cfg, rng))
            except DivergenceError as e:
                crash = write_checkpoint(checkpoint_dir / f"crash_{agent_steps}.ircm", network)
                logger.error("update %d diverged (%s); wrote %s", update, e, crash)
                raise

            last = update == n_updates - 1
            sr_heard = sr_unheard = None
            if last or (cfg.eval_interval and (update + 1) % cfg.eval_interval == 0):
                sr_heard = _eval_success(network, run_cfg, library, "heard")
                sr_unheard = _eval_success(network, run_cfg, library, "unheard")

            record: Dict[str, object] = {
                "update_index": update,
                "agent_steps": agent_steps,
                "mean_reward": float(buffer.rewards.mean()),
                "train_sr": (
                    buffer.episodes_succeeded / buffer.episodes_finished
                    if buffer.episodes_finished
                    else None
                ),
                "sr_heard": sr_heard,
                "sr_unheard": sr_unheard,
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "entropy": stats["entropy"],
                "kl": stats["kl"],
                "clip_frac": stats["clip_frac"],
            }
            metrics_file.write(json.dumps(record) + "\n")
            metrics_file.flush()
            records.append(record)
            if progress is not None:
                progress(record)

            if agent_steps >= next_checkpoint or last:
                last_checkpoint = write_checkpoint(
                    checkpoint_dir / checkpoint_name(agent_steps), network
                )
                while next_checkpoint <= agent_steps:
                    next_checkpoint += cfg.checkpoint_interval

    return TrainResult(network, agent_steps, n_updates, last_checkpoint, records)


def read_metrics(run_dir: Path) -> List[Dict[str, object]]:
    with open(Path(run_dir) / METRICS_FILE) as f:
        return [json.loads(line) for line in f if line.strip()]
