"""Desk-scale audio-visual navigation simulator.

Worlds are N x N occupancy grids with one static sound source. The agent moves
on 4-connected cells with 90-degree turns and hears the source through a
geodesic attenuation model with an interaural level difference (ILD), so sound
"bends" around walls the way a walkable path does.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import IO, Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import SimConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

HEADINGS = ("N", "E", "S", "W")
# (row, col) offsets for N, E, S, W
DELTAS: Tuple[Cell, ...] = ((-1, 0), (0, 1), (1, 0), (0, -1))

SPLITS = ("heard", "unheard")


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


ACTION_NAMES = {
    Action.FORWARD: "forward",
    Action.TURN_LEFT: "turn-left",
    Action.TURN_RIGHT: "turn-right",
    Action.STOP: "stop",
}

OUTCOME_RUNNING = "running"
OUTCOME_SUCCESS = "success"
OUTCOME_FAILURE = "failure"


@dataclass(frozen=True)
class AgentPose:
    cell: Cell
    heading: int

    def __post_init__(self):
        if self.heading not in range(4):
            raise ValueError(f"heading must be 0..3, got {self.heading}")


@dataclass(frozen=True)
class ModalityObservation:
    """One step of egocentric vision and binaural audio."""

    visual: np.ndarray  # [H, W, 2]
    audio: np.ndarray  # [2, F], row 0 left ear, row 1 right ear


def geodesic_field(occupancy: np.ndarray, source: Cell) -> np.ndarray:
    """Breadth-first wall-respecting distance to ``source``; walls and
    unreachable cells hold -1."""
    size_r, size_c = occupancy.shape
    dist = np.full(occupancy.shape, -1, dtype=np.int32)
    dist[source] = 0
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        for dr, dc in DELTAS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < size_r and 0 <= nc < size_c:
                if not occupancy[nr, nc] and dist[nr, nc] < 0:
                    dist[nr, nc] = dist[r, c] + 1
                    queue.append((nr, nc))
    return dist


def _label_components(occupancy: np.ndarray) -> Tuple[np.ndarray, int]:
    labels = np.full(occupancy.shape, -1, dtype=np.int32)
    count = 0
    for start in zip(*np.nonzero(~occupancy)):
        if labels[start] >= 0:
            continue
        reach = geodesic_field(occupancy, start) >= 0
        labels[reach] = count
        count += 1
    return labels, count


def _neighbours(cell: Cell, size: int) -> List[Cell]:
    r, c = cell
    return [
        (r + dr, c + dc)
        for dr, dc in DELTAS
        if 0 <= r + dr < size and 0 <= c + dc < size
    ]


def _prune_until_connected(occupancy: np.ndarray, rng: np.random.Generator) -> int:
    """Remove walls until every free cell is reachable; returns walls removed."""
    size = occupancy.shape[0]
    removed = 0
    while True:
        labels, count = _label_components(occupancy)
        if count <= 1:
            return removed
        main = int(np.argmax(np.bincount(labels[labels >= 0])))
        bridges, borders = [], []
        for wall in zip(*np.nonzero(occupancy)):
            adjacent = {labels[n] for n in _neighbours(wall, size) if labels[n] >= 0}
            if main in adjacent:
                borders.append(wall)
                if len(adjacent) > 1:
                    bridges.append(wall)
        candidates = bridges or borders
        pick = candidates[int(rng.integers(len(candidates)))]
        occupancy[pick] = False
        removed += 1


@dataclass
class GridWorld:
    occupancy: np.ndarray  # bool, True = wall
    source_cell: Cell
    sound_id: int
    geodesic: np.ndarray = field(repr=False)
    seed: Optional[int] = None

    @classmethod
    def from_occupancy(
        cls,
        occupancy: np.ndarray,
        source_cell: Cell,
        sound_id: int = 0,
        seed: Optional[int] = None,
    ) -> "GridWorld":
        occupancy = np.asarray(occupancy, dtype=bool)
        if occupancy.ndim != 2 or occupancy.shape[0] != occupancy.shape[1]:
            raise ConfigError(f"occupancy must be square, got {occupancy.shape}")
        if occupancy[source_cell]:
            raise ConfigError(f"source cell {source_cell} is a wall")
        return cls(
            occupancy=occupancy,
            source_cell=tuple(int(v) for v in source_cell),
            sound_id=sound_id,
            geodesic=geodesic_field(occupancy, source_cell),
            seed=seed,
        )

    @property
    def size(self) -> int:
        return int(self.occupancy.shape[0])

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.size and 0 <= cell[1] < self.size

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.occupancy[cell]

    def free_cells(self) -> List[Cell]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(~self.occupancy))]

    def distance(self, cell: Cell) -> int:
        return int(self.geodesic[cell])

    def to_text(self) -> str:
        """Plain-text snapshot: '#' wall, '.' free, 'S' source."""
        lines = [
            f"size={self.size} source={self.source_cell[0]},{self.source_cell[1]} "
            f"sound_id={self.sound_id} seed={self.seed}"
        ]
        for r in range(self.size):
            row = []
            for c in range(self.size):
                if (r, c) == self.source_cell:
                    row.append("S")
                else:
                    row.append("#" if self.occupancy[r, c] else ".")
            lines.append("".join(row))
        return "\n".join(lines) + "\n"


def world_generate(
    seed: int,
    size: int,
    wall_density: float,
    sound_ids: Sequence[int] = (0,),
) -> GridWorld:
    """Deterministically generate a connected world from ``seed``."""
    if size < 4:
        raise ConfigError(f"world size must be >= 4, got {size}")
    if not 0.0 <= wall_density <= 0.4:
        raise ConfigError(f"wall_density must lie in [0, 0.4], got {wall_density}")
    if not sound_ids:
        raise ConfigError("world_generate needs at least one sound id")

    rng = np.random.default_rng(seed)
    occupancy = np.zeros((size, size), dtype=bool)
    n_walls = int(round(wall_density * size * size))
    if n_walls:
        occupancy.flat[rng.choice(size * size, size=n_walls, replace=False)] = True
    removed = _prune_until_connected(occupancy, rng)
    if removed:
        logger.debug("world %d: pruned %d walls for connectivity", seed, removed)

    free = np.argwhere(~occupancy)
    source = tuple(int(v) for v in free[int(rng.integers(len(free)))])
    sound_id = int(sound_ids[int(rng.integers(len(sound_ids)))])
    return GridWorld.from_occupancy(occupancy, source, sound_id, seed=seed)


@dataclass(frozen=True)
class SoundLibrary:
    """L2-normalised magnitude templates split into heard and unheard sets."""

    profiles: np.ndarray  # [n_profiles, F]
    heard: Tuple[int, ...]
    unheard: Tuple[int, ...]

    @classmethod
    def synthetic(
        cls, n_profiles: int = 16, n_bins: int = 32, n_unheard: int = 4
    ) -> "SoundLibrary":
        """Band-pass templates with distinct centres and widths."""
        if not 0 < n_unheard < n_profiles:
            raise ConfigError("need at least one heard and one unheard profile")
        bins = np.arange(n_bins, dtype=np.float64)
        centres = np.linspace(2.0, n_bins - 3.0, n_profiles)
        widths = (1.5, 3.0, 5.0)
        profiles = np.empty((n_profiles, n_bins))
        for k, centre in enumerate(centres):
            shape = np.exp(-0.5 * ((bins - centre) / widths[k % len(widths)]) ** 2)
            # a weaker harmonic gives templates with equal centres distinct shapes
            harmonic = (centre * 1.7) % n_bins
            shape += 0.3 * np.exp(-0.5 * ((bins - harmonic) / 2.0) ** 2)
            profiles[k] = shape / np.linalg.norm(shape)
        stride = n_profiles // n_unheard
        unheard = tuple(sorted(n_profiles - 1 - stride * i for i in range(n_unheard)))
        heard = tuple(k for k in range(n_profiles) if k not in unheard)
        return cls(profiles=profiles.astype(np.float32), heard=heard, unheard=unheard)

    @classmethod
    def from_config(cls, cfg: SimConfig) -> "SoundLibrary":
        return cls.synthetic(cfg.n_profiles, cfg.audio_bins, cfg.n_unheard)

    @property
    def n_bins(self) -> int:
        return int(self.profiles.shape[1])

    def ids(self, split: str) -> Tuple[int, ...]:
        if split == "heard":
            return self.heard
        if split == "unheard":
            return self.unheard
        raise ConfigError(f"Unknown split '{split}'; expected one of {SPLITS}")


def base_gain(distance: int) -> float:
    return 1.0 / (1.0 + distance)


def first_step_direction(world: GridWorld, cell: Cell) -> Optional[int]:
    """Heading of the first move along a shortest path to the source
    (ties broken N, E, S, W); None on the source cell."""
    here = world.distance(cell)
    if here <= 0:
        return None
    for heading, (dr, dc) in enumerate(DELTAS):
        neighbour = (cell[0] + dr, cell[1] + dc)
        if world.is_free(neighbour) and world.distance(neighbour) == here - 1:
            return heading
    return None


def ear_gains(world: GridWorld, pose: AgentPose, ild: float) -> Tuple[float, float, bool]:
    """Return (left gain, right gain, source behind)."""
    distance = world.distance(pose.cell)
    if distance == 0:
        return 1.0, 1.0, False
    gain = base_gain(distance)
    relative = (first_step_direction(world, pose.cell) - pose.heading) % 4
    # +1 source to the right, -1 to the left, 0 ahead or behind
    lateral = (0, 1, 0, -1)[relative]
    right = gain * (1.0 + ild * lateral) / 2.0
    left = gain * (1.0 - ild * lateral) / 2.0
    return left, right, relative == 2


def render_audio(
    world: GridWorld,
    pose: AgentPose,
    library: SoundLibrary,
    rng: Optional[np.random.Generator] = None,
    ild: float = 0.4,
    noise_std: float = 0.01,
    rear_shadow: float = 1.0,
) -> np.ndarray:
    """Per-ear magnitude spectra ``[2, F]`` at ``pose``."""
    profile = library.profiles[world.sound_id].astype(np.float64)
    left, right, behind = ear_gains(world, pose, ild)
    spectra = np.stack([profile * left, profile * right])
    if behind:
        spectra[:, library.n_bins // 2 :] *= rear_shadow
    if rng is not None and noise_std > 0.0:
        spectra = spectra + rng.normal(0.0, noise_std, size=spectra.shape)
    return np.clip(spectra, 0.0, 1.0).astype(np.float32)


def render_vision(
    world: GridWorld, pose: AgentPose, window: Tuple[int, int] = (8, 8)
) -> np.ndarray:
    """Egocentric ``[H, W, 2]`` window, forward pointing up.

    The agent sits on the bottom row at column ``W // 2``. Channel 0 is
    occupancy (out-of-bounds reads as wall); channel 1 is, per column, the
    distance to the first wall ahead divided by H (1.0 when none is visible).
    """
    height, width = window
    centre = width // 2
    fr, fc = DELTAS[pose.heading]
    rr, rc = DELTAS[(pose.heading + 1) % 4]
    ahead = (height - 1 - np.arange(height))[:, None]
    lateral = (np.arange(width) - centre)[None, :]
    rows = pose.cell[0] + ahead * fr + lateral * rr
    cols = pose.cell[1] + ahead * fc + lateral * rc
    inside = (rows >= 0) & (rows < world.size) & (cols >= 0) & (cols < world.size)

    occupancy = np.ones((height, width), dtype=np.float32)
    occupancy[inside] = world.occupancy[rows[inside], cols[inside]]
    occupancy[height - 1, centre] = 0.0

    depth = np.ones(width, dtype=np.float32)
    for col in range(width):
        hits = np.nonzero(occupancy[height - 2 :: -1, col])[0] if height > 1 else []
        if len(hits):
            depth[col] = (hits[0] + 1) / height

    vision = np.empty((height, width, 2), dtype=np.float32)
    vision[..., 0] = occupancy
    vision[..., 1] = depth[None, :]
    return vision


def observe(
    world: GridWorld,
    pose: AgentPose,
    library: SoundLibrary,
    cfg: SimConfig,
    rng: Optional[np.random.Generator] = None,
) -> ModalityObservation:
    return ModalityObservation(
        visual=render_vision(world, pose, tuple(cfg.vision_size)),
        audio=render_audio(
            world,
            pose,
            library,
            rng,
            ild=cfg.ild,
            noise_std=cfg.noise_std,
            rear_shadow=cfg.rear_shadow,
        ),
    )


@dataclass(frozen=True)
class StepResult:
    pose: AgentPose
    observation: ModalityObservation
    reward: float
    done: bool
    outcome: str
    moved: bool


def apply_action(world: GridWorld, pose: AgentPose, action: int) -> Tuple[AgentPose, bool]:
    """Pose after ``action`` and whether the agent changed cell."""
    action = Action(action)
    if action == Action.FORWARD:
        dr, dc = DELTAS[pose.heading]
        target = (pose.cell[0] + dr, pose.cell[1] + dc)
        if world.is_free(target):
            return AgentPose(target, pose.heading), True
        return pose, False
    if action == Action.TURN_LEFT:
        return AgentPose(pose.cell, (pose.heading - 1) % 4), False
    if action == Action.TURN_RIGHT:
        return AgentPose(pose.cell, (pose.heading + 1) % 4), False
    return pose, False


def step(
    world: GridWorld,
    pose: AgentPose,
    action: int,
    *,
    library: SoundLibrary,
    cfg: SimConfig,
    steps_taken: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> StepResult:
    """Advance one action. ``steps_taken`` counts actions before this one."""
    if int(action) not in range(len(Action)):
        raise ValueError(f"Unknown action {action}")
    new_pose, moved = apply_action(world, pose, action)

    reward = -cfg.step_penalty
    if cfg.reward_shaping:
        reward += cfg.shaping_coef * (world.distance(pose.cell) - world.distance(new_pose.cell))

    done, outcome = False, OUTCOME_RUNNING
    if int(action) == Action.STOP:
        done = True
        if world.distance(new_pose.cell) == 0:
            outcome = OUTCOME_SUCCESS
            reward += cfg.success_reward
        else:
            outcome = OUTCOME_FAILURE
    elif steps_taken + 1 >= cfg.max_episode_steps:
        done, outcome = True, OUTCOME_FAILURE

    observation = observe(world, new_pose, library, cfg, rng)
    return StepResult(new_pose, observation, float(reward), done, outcome, moved)


@dataclass(frozen=True)
class EpisodeSpec:
    """A reproducible episode: world, sound and start pose."""

    world_seed: int
    sound_id: int
    start: AgentPose


def make_episode(
    cfg: SimConfig, library: SoundLibrary, split: str, world_seed: int
) -> Tuple[GridWorld, EpisodeSpec]:
    world = world_generate(world_seed, cfg.world_size, cfg.wall_density, library.ids(split))
    rng = np.random.default_rng([world_seed, 7])
    starts = [c for c in world.free_cells() if world.distance(c) >= cfg.min_start_distance]
    if not starts:
        starts = world.free_cells()
    cell = starts[int(rng.integers(len(starts)))]
    start = AgentPose(cell, int(rng.integers(4)))
    return world, EpisodeSpec(world_seed, world.sound_id, start)


class NavEnv:
    """One navigation episode at a time, owning its RNG and step counter."""

    def __init__(
        self,
        cfg: SimConfig,
        library: SoundLibrary,
        split: str = "heard",
        seed: int = 0,
    ):
        library.ids(split)
        self.cfg = cfg
        self.library = library
        self.split = split
        self.rng = np.random.default_rng(seed)
        self.world: Optional[GridWorld] = None
        self.pose: Optional[AgentPose] = None
        self.observation: Optional[ModalityObservation] = None
        self.episode_id = -1
        self.steps_taken = 0
        self.path_length = 0
        self.start_distance = 0
        self.start_pose: Optional[AgentPose] = None

    def reset(self, world_seed: Optional[int] = None) -> ModalityObservation:
        if world_seed is None:
            low, high = self.cfg.train_world_seeds
            world_seed = int(self.rng.integers(low, high))
        self.world, spec = make_episode(self.cfg, self.library, self.split, world_seed)
        self.pose = spec.start
        self.start_pose = spec.start
        self.episode_id += 1
        self.steps_taken = 0
        self.path_length = 0
        self.start_distance = self.world.distance(self.pose.cell)
        self.observation = observe(self.world, self.pose, self.library, self.cfg, self.rng)
        return self.observation

    def step(self, action: int) -> StepResult:
        if self.world is None or self.pose is None:
            raise RuntimeError("NavEnv.step called before reset")
        result = step(
            self.world,
            self.pose,
            action,
            library=self.library,
            cfg=self.cfg,
            steps_taken=self.steps_taken,
            rng=self.rng,
        )
        self.steps_taken += 1
        self.path_length += int(result.moved)
        self.pose = result.pose
        self.observation = result.observation
        return result

    def trajectory_record(self, action: int, result: StepResult) -> Dict[str, Any]:
        return {
            "episode_id": self.episode_id,
            "step_index": self.steps_taken - 1,
            "cell": list(result.pose.cell),
            "heading": HEADINGS[result.pose.heading],
            "action": ACTION_NAMES[Action(action)],
            "reward": result.reward,
            "geodesic": self.world.distance(result.pose.cell),
            "done": result.done,
            "outcome": result.outcome,
        }


class TrajectoryWriter:
    """Writes one JSON record per step."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._file: Optional[IO[str]] = None

    def __enter__(self) -> "TrajectoryWriter":
        self._file = open(self.path, "w")
        return self

    def __exit__(self, *exc) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def write(self, record: Dict[str, Any]) -> None:
        if self._file is None:
            raise RuntimeError("TrajectoryWriter used outside a with-block")
        self._file.write(json.dumps(record) + "\n")
