"""Run configuration: validated models, YAML loading and overrides."""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

RUN_DIR_ENV = "IRCAM_RUN_DIR"

LEARNING_RATE_PRESETS = {
    "replica": 1e-4,
    "matterport3d": 4e-5,
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class IrcamConfig(_Section):
    """Network hyperparameters and ablation switches."""

    d_model: int = Field(64, ge=1, description="Token embedding width")
    n_heads: int = Field(4, ge=1, description="Attention heads per layer")
    n_enc_layers: int = Field(2, ge=0, description="Self-attention encoder depth")
    n_dec_iters: int = Field(6, ge=1, description="Iterative decoder steps")
    n_query: int = Field(8, ge=1, description="Learned query sequence length")
    ffn_mult: int = Field(4, ge=1, description="Feed-forward expansion factor")
    head_hidden: int = Field(64, ge=1, description="Actor/critic hidden width")
    visual_size: Tuple[int, int] = Field(
        (8, 8), description="Egocentric window (height, width) in cells"
    )
    visual_channels: int = Field(2, ge=1, description="Channels per vision cell")
    audio_bins: int = Field(32, ge=1, description="Spectrum bins per ear")
    visual_patch: int = Field(4, ge=1, description="Visual patch side length")
    audio_patch: int = Field(8, ge=1, description="Audio patch size in bins")
    conv_channels: int = Field(16, ge=1, description="Hidden channels of the conv audio stem")
    conv_kernel: int = Field(4, ge=1, description="Kernel size of the conv audio stem")
    conv_stride: int = Field(2, ge=1, description="Stride of the conv audio stem")
    layer_norm_eps: float = Field(1e-5, gt=0.0)
    share_decoder_weights: bool = Field(
        False, description="Reuse one decoder layer for every iteration"
    )
    ablate_rt: bool = Field(False, description="Replace memory instead of concatenating")
    ablate_pe: bool = Field(False, description="Convolutional audio stem instead of patches")
    ablate_en: bool = Field(False, description="Skip the self-attention encoder")
    seed: int = Field(0, description="Parameter initialization seed")

    @model_validator(mode="after")
    def _check_shapes(self) -> "IrcamConfig":
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        height, width = self.visual_size
        if height % self.visual_patch or width % self.visual_patch:
            raise ValueError(
                f"visual_size {self.visual_size} is not divisible by "
                f"visual_patch {self.visual_patch}"
            )
        if self.audio_bins % self.audio_patch:
            raise ValueError(
                f"audio_bins ({self.audio_bins}) is not divisible by "
                f"audio_patch ({self.audio_patch})"
            )
        return self

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


class SimConfig(_Section):
    """Grid-world simulator parameters."""

    world_size: int = Field(8, ge=4)
    wall_density: float = Field(0.25, ge=0.0, le=0.4)
    vision_size: Tuple[int, int] = Field((8, 8), description="Window (height, width)")
    audio_bins: int = Field(32, ge=4)
    n_profiles: int = Field(16, ge=2)
    n_unheard: int = Field(4, ge=1)
    ild: float = Field(0.4, ge=0.0, lt=1.0, description="Interaural level difference")
    noise_std: float = Field(0.01, ge=0.0)
    rear_shadow: float = Field(
        1.0, ge=0.0, le=1.0,
        description="Gain on the upper spectrum for sources behind; 1.0 disables it",
    )
    max_episode_steps: int = Field(500, ge=1)
    step_penalty: float = 0.01
    shaping_coef: float = 0.25
    reward_shaping: bool = True
    success_reward: float = 10.0
    min_start_distance: int = Field(1, ge=0)
    train_world_seeds: Tuple[int, int] = Field(
        (0, 100_000), description="Half-open seed range for training worlds"
    )

    @model_validator(mode="after")
    def _check_profiles(self) -> "SimConfig":
        if self.n_unheard >= self.n_profiles:
            raise ValueError("n_unheard must leave at least one heard profile")
        low, high = self.train_world_seeds
        if high <= low:
            raise ValueError("train_world_seeds must be a non-empty range")
        return self


class TrainConfig(_Section):
    """PPO hyperparameters."""

    learning_rate: float = Field(1e-4, gt=0.0)
    lr_preset: Optional[Literal["replica", "matterport3d"]] = None
    gamma: float = Field(0.99, gt=0.0, le=1.0)
    gae_lambda: float = Field(0.95, ge=0.0, le=1.0)
    clip_ratio: float = Field(0.2, gt=0.0)
    epochs_per_update: int = Field(4, ge=1)
    minibatch_size: int = Field(256, ge=1)
    horizon: int = Field(128, ge=1)
    n_envs: int = Field(8, ge=1)
    total_steps: int = Field(300_000, ge=1)
    entropy_coef: float = Field(0.01, ge=0.0)
    value_coef: float = Field(0.5, ge=0.0)
    max_grad_norm: float = Field(0.5, ge=0.0)
    checkpoint_interval: int = Field(50_000, ge=1, description="Agent steps between checkpoints")
    eval_interval: int = Field(10, ge=0, description="Updates between evaluations (0 = off)")
    eval_episodes: int = Field(20, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _apply_preset(self) -> "TrainConfig":
        if self.lr_preset is not None:
            self.learning_rate = LEARNING_RATE_PRESETS[self.lr_preset]
        return self


class EvalConfig(_Section):
    """Evaluation protocol parameters."""

    n_episodes: int = Field(200, ge=1)
    greedy: bool = Field(True, description="Argmax actions; sample when false")
    seed_base: int = Field(1_000_000, description="First held-out world seed")
    seed: int = 0


class RunConfig(_Section):
    """Everything needed to reproduce a run."""

    run_name: str = "ircam"
    output_dir: str = "runs"
    network: IrcamConfig = Field(default_factory=IrcamConfig)
    sim: SimConfig = Field(default_factory=SimConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if tuple(self.network.visual_size) != tuple(self.sim.vision_size):
            raise ValueError(
                f"network.visual_size {self.network.visual_size} does not match "
                f"sim.vision_size {self.sim.vision_size}"
            )
        if self.network.audio_bins != self.sim.audio_bins:
            raise ValueError(
                f"network.audio_bins ({self.network.audio_bins}) does not match "
                f"sim.audio_bins ({self.sim.audio_bins})"
            )
        episodes = max(self.eval.n_episodes, self.train.eval_episodes)
        if not self.eval_seeds_held_out(episodes):
            raise ValueError(
                "eval.seed_base range overlaps sim.train_world_seeds; "
                "evaluation worlds must be held out"
            )
        return self

    def eval_seeds_held_out(self, n_episodes: int) -> bool:
        low, high = self.sim.train_world_seeds
        return not (low < self.eval.seed_base + n_episodes and self.eval.seed_base < high)

    def check_eval_range(self, n_episodes: int) -> None:
        if not self.eval_seeds_held_out(n_episodes):
            raise ConfigError(
                f"{n_episodes} evaluation worlds from seed {self.eval.seed_base} overlap "
                f"the training seeds {tuple(self.sim.train_world_seeds)}"
            )

    def run_root(self) -> Path:
        return Path(os.environ.get(RUN_DIR_ENV) or self.output_dir)

    def run_dir(self) -> Path:
        return self.run_root() / self.run_name


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return "; ".join(lines)


def load_mapping(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a YAML (or JSON) mapping from disk."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    with open(path, "r") as f:
        try:
            content = yaml.safe_load(f)
        except yaml.YAMLError:
            f.seek(0)
            try:
                content = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Cannot parse config file {path}: {e}") from e
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise ConfigError(f"Config file {path} must contain a mapping")
    return content


def apply_overrides(raw: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    for override in overrides:
        if "=" not in override:
            raise ConfigError(f"Override '{override}' is not of the form key=value")
        dotted, value = override.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"Override '{override}' has an empty key")
        node = raw
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Override '{override}': '{key}' is not a section")
            node = child
        node[keys[-1]] = yaml.safe_load(value)
    return raw


def build_run_config(raw: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {_format_validation_error(e)}") from e


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()
) -> RunConfig:
    """Load a run config file (defaults when ``path`` is None) and apply overrides."""
    raw = load_mapping(path) if path is not None else {}
    return build_run_config(apply_overrides(raw, overrides))


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def write_run_config(config: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(dump_run_config(config))


def network_config_from_text(text: str) -> IrcamConfig:
    try:
        return IrcamConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(
            f"Invalid network config: {_format_validation_error(e)}"
        ) from e


def ablation_variants(base: IrcamConfig) -> List[Tuple[str, IrcamConfig]]:
    """The four networks compared in an ablation sweep."""
    clean = base.model_copy(
        update={"ablate_rt": False, "ablate_pe": False, "ablate_en": False}
    )
    return [
        ("full", clean),
        ("wo_rt", clean.model_copy(update={"ablate_rt": True})),
        ("wo_pe", clean.model_copy(update={"ablate_pe": True})),
        ("wo_en", clean.model_copy(update={"ablate_en": True})),
    ]
