"""Shared fixtures: configs small enough for a unit-test budget."""

import pytest

from src.ircam_nav.config import IrcamConfig, RunConfig, SimConfig
from src.ircam_nav.sim import SoundLibrary

TOY_NETWORK = dict(d_model=8, n_heads=2, n_enc_layers=1, n_dec_iters=2, n_query=2, head_hidden=8)


@pytest.fixture
def toy_network_config():
    return IrcamConfig(**TOY_NETWORK)


@pytest.fixture
def sim_config():
    return SimConfig()


@pytest.fixture
def library(sim_config):
    return SoundLibrary.from_config(sim_config)


@pytest.fixture
def tiny_run_config(tmp_path):
    """A run that trains for two PPO updates and evaluates two episodes."""
    return RunConfig.model_validate(
        {
            "run_name": "tiny",
            "output_dir": str(tmp_path / "runs"),
            "network": TOY_NETWORK,
            "sim": {"max_episode_steps": 12},
            "train": {
                "horizon": 8,
                "n_envs": 2,
                "total_steps": 32,
                "minibatch_size": 8,
                "epochs_per_update": 1,
                "eval_interval": 0,
                "eval_episodes": 2,
                "checkpoint_interval": 16,
            },
            "eval": {"n_episodes": 2},
        }
    )
