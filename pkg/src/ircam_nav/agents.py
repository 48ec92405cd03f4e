"""Agents that act in a ``NavEnv``: the learned policy and comparison baselines."""

from typing import List, Optional

import numpy as np

from .metrics import shortest_action_plan
from .network import IrcamNetwork, greedy_actions, sample_actions
from .sim import Action, NavEnv
from .tensor import no_grad


class Agent:
    """Base class; subclasses choose one action per step."""

    name = "agent"

    def reset(self, env: NavEnv) -> None:
        pass

    def act(self, env: NavEnv) -> int:
        raise NotImplementedError


class RandomAgent(Agent):
    """Uniform over all four actions, including stop."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def act(self, env: NavEnv) -> int:
        return int(self.rng.integers(len(Action)))


class GreedyAudioAgent(Agent):
    """Turns toward the louder ear, walks forward while loudness holds, and
    stops when loudness jumps (the source cell is much louder than its
    neighbours)."""

    name = "greedy-audio"

    def __init__(self, asymmetry_threshold: float = 0.15, stop_ratio: float = 1.6):
        self.asymmetry_threshold = asymmetry_threshold
        self.stop_ratio = stop_ratio
        self._previous: Optional[float] = None
        self._last_action: Optional[int] = None
        self._last_cell = None
        self._pending: List[int] = []

    def reset(self, env: NavEnv) -> None:
        self._previous = None
        self._last_action = None
        self._last_cell = env.pose.cell
        self._pending = []

    def _choose(self, env: NavEnv) -> int:
        audio = env.observation.audio
        left, right = float(audio[0].sum()), float(audio[1].sum())
        loudness = left + right
        previous, self._previous = self._previous, loudness
        moved = env.pose.cell != self._last_cell

        if self._last_action == Action.FORWARD and previous is not None:
            if moved and loudness >= self.stop_ratio * previous:
                return int(Action.STOP)
            if moved and loudness < previous:
                self._pending = [int(Action.TURN_RIGHT)]
                return int(Action.TURN_RIGHT)
            if not moved:
                return int(Action.TURN_RIGHT)
        if self._pending:
            return self._pending.pop()

        asymmetry = (right - left) / (loudness + 1e-8)
        if asymmetry > self.asymmetry_threshold:
            return int(Action.TURN_RIGHT)
        if asymmetry < -self.asymmetry_threshold:
            return int(Action.TURN_LEFT)
        return int(Action.FORWARD)

    def act(self, env: NavEnv) -> int:
        action = self._choose(env)
        self._last_action = action
        self._last_cell = env.pose.cell
        return action


class OracleAgent(Agent):
    """Replays a shortest (cell, heading) plan using the world map."""

    name = "oracle"

    def __init__(self):
        self._plan: List[int] = []

    def reset(self, env: NavEnv) -> None:
        self._plan = shortest_action_plan(env.world, env.pose)

    def act(self, env: NavEnv) -> int:
        return self._plan.pop(0) if self._plan else int(Action.STOP)


class PolicyAgent(Agent):
    """Acts with an IRCAM network; argmax by default, sampling otherwise."""

    name = "ircam"

    def __init__(self, network: IrcamNetwork, greedy: bool = True, seed: int = 0):
        self.network = network
        self.greedy = greedy
        self.rng = np.random.default_rng(seed)

    def act(self, env: NavEnv) -> int:
        with no_grad():
            output, _ = self.network.policy(env.observation)
        logits = output.action_logits.data
        if self.greedy:
            return int(greedy_actions(logits)[0])
        return int(sample_actions(logits, self.rng)[0])
