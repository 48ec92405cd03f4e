import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.ircam_nav.config import SimConfig
from src.ircam_nav.errors import ConfigError
from src.ircam_nav.sim import (
    OUTCOME_FAILURE,
    OUTCOME_SUCCESS,
    Action,
    AgentPose,
    GridWorld,
    NavEnv,
    SoundLibrary,
    TrajectoryWriter,
    geodesic_field,
    make_episode,
    render_audio,
    render_vision,
    step,
    world_generate,
)


def open_world(size=4, source=(0, 0), sound_id=0):
    return GridWorld.from_occupancy(np.zeros((size, size), dtype=bool), source, sound_id)


def relaxed_distances(world):
    """Shortest free-cell step counts by repeated relaxation; -1 where unreachable."""
    free = set(world.free_cells())
    dist = {cell: math.inf for cell in free}
    dist[world.source_cell] = 0
    changed = True
    while changed:
        changed = False
        for r, c in free:
            for nb in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if nb in free and dist[nb] + 1 < dist[(r, c)]:
                    dist[(r, c)] = dist[nb] + 1
                    changed = True
    return {cell: (-1 if d == math.inf else d) for cell, d in dist.items()}


class TestGeodesic:
    """Wall-respecting breadth-first distances."""

    def test_open_grid_corner_to_corner(self):
        """On an open 4x4 grid the far corner is 6 moves away."""
        field = geodesic_field(np.zeros((4, 4), dtype=bool), (0, 0))
        assert field[3, 3] == 6

    def test_walls_lengthen_paths(self):
        """A wall row with one gap forces a detour."""
        occupancy = np.zeros((4, 4), dtype=bool)
        occupancy[1, :3] = True
        field = geodesic_field(occupancy, (0, 0))
        # (2, 0) must go around through (1, 3)
        assert field[2, 0] == 8
        assert field[1, 0] == -1

    def test_unreachable_cells(self):
        occupancy = np.zeros((4, 4), dtype=bool)
        occupancy[1, :] = True
        assert geodesic_field(occupancy, (0, 0))[3, 3] == -1


class TestWorldGenerate:
    """Seeded, connected world generation."""

    def test_deterministic(self):
        a = world_generate(17, 8, 0.25, (0, 1, 2))
        b = world_generate(17, 8, 0.25, (0, 1, 2))
        np.testing.assert_array_equal(a.occupancy, b.occupancy)
        assert (a.source_cell, a.sound_id) == (b.source_cell, b.sound_id)

    def test_open_world(self):
        """Density 0 on size 4 leaves 16 free cells."""
        world = world_generate(3, 4, 0.0)
        assert len(world.free_cells()) == 16

    def test_density_out_of_range(self):
        with pytest.raises(ConfigError):
            world_generate(0, 8, 0.9)

    def test_size_too_small(self):
        with pytest.raises(ConfigError):
            world_generate(0, 3, 0.1)

    @settings(max_examples=60, deadline=None)
    @given(
        seed=st.integers(0, 10**6),
        size=st.integers(4, 10),
        density=st.floats(0.0, 0.4),
    )
    def test_every_free_cell_reaches_source(self, seed, size, density):
        world = world_generate(seed, size, density)
        assert not world.occupancy[world.source_cell]
        for cell in world.free_cells():
            assert world.distance(cell) >= 0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), density=st.floats(0.0, 0.4))
    def test_geodesic_field_is_consistent(self, seed, density):
        """Matches an independent relaxation; neighbours differ by at most one step."""
        world = world_generate(seed, 6, density)
        expected = relaxed_distances(world)
        for (r, c), d in expected.items():
            assert world.distance((r, c)) == d
            for nb in ((r + 1, c), (r, c + 1)):
                if world.is_free(nb):
                    assert abs(world.distance(nb) - d) <= 1
        assert (world.geodesic[world.occupancy] == -1).all()

    def test_text_snapshot(self):
        text = open_world(source=(1, 2)).to_text().splitlines()
        assert text[0].startswith("size=4 source=1,2")
        assert text[2] == "..S."


class TestSoundLibrary:
    """Heard/unheard profile split."""

    def test_default_split(self):
        """16 profiles, 4 unheard, 12 heard, disjoint."""
        library = SoundLibrary.synthetic()
        assert library.unheard == (3, 7, 11, 15)
        assert len(library.heard) == 12
        assert not set(library.heard) & set(library.unheard)

    def test_profiles_normalized(self):
        library = SoundLibrary.synthetic()
        np.testing.assert_allclose(np.linalg.norm(library.profiles, axis=1), 1.0, atol=1e-5)

    def test_unknown_split(self):
        with pytest.raises(ConfigError):
            SoundLibrary.synthetic().ids("val")


class TestRendering:
    """Binaural audio and egocentric vision."""

    def setup_method(self):
        self.library = SoundLibrary.synthetic()
        self.world = open_world()

    def test_on_source_both_ears_full_gain(self):
        audio = render_audio(self.world, AgentPose((0, 0), 1), self.library, noise_std=0.0)
        np.testing.assert_allclose(audio[0], self.library.profiles[0], atol=1e-6)
        np.testing.assert_allclose(audio[1], audio[0])

    def test_interaural_level_difference(self):
        """Source along the path to the agent's right is louder in the right ear."""
        # from (0, 2) the first step is west; facing south puts west on the right
        audio = render_audio(self.world, AgentPose((0, 2), 2), self.library, ild=0.4)
        profile = self.library.profiles[0]
        np.testing.assert_allclose(audio[1], profile * (1 / 3) * 1.4 / 2, atol=1e-6)
        np.testing.assert_allclose(audio[0], profile * (1 / 3) * 0.6 / 2, atol=1e-6)

    def test_source_ahead_is_symmetric(self):
        audio = render_audio(self.world, AgentPose((0, 2), 3), self.library)
        np.testing.assert_array_equal(audio[0], audio[1])

    def test_rear_shadow(self):
        """Facing away halves the upper half of the spectrum."""
        ahead = render_audio(self.world, AgentPose((0, 2), 3), self.library, rear_shadow=0.5)
        behind = render_audio(self.world, AgentPose((0, 2), 1), self.library, rear_shadow=0.5)
        np.testing.assert_allclose(behind[:, :16], ahead[:, :16])
        np.testing.assert_allclose(behind[:, 16:], ahead[:, 16:] * 0.5, atol=1e-7)

    def test_attenuation_monotone_in_distance(self):
        near = render_audio(self.world, AgentPose((0, 1), 3), self.library).sum()
        far = render_audio(self.world, AgentPose((0, 3), 3), self.library).sum()
        assert near > far

    def test_source_behind_keeps_full_spectrum_by_default(self):
        """One step away, facing away: each ear hears profile * g / 2 with g = 1/2."""
        audio = render_audio(self.world, AgentPose((0, 1), 1), self.library, noise_std=0.0)
        expected = self.library.profiles[0] * 0.5 / 2
        np.testing.assert_allclose(audio[0], expected, atol=1e-6)
        np.testing.assert_allclose(audio[1], expected, atol=1e-6)

    def test_far_source_gain(self):
        """Nine steps from the source the gain is 1/10."""
        world = open_world(size=10)
        audio = render_audio(world, AgentPose((0, 9), 3), self.library)
        np.testing.assert_allclose(audio[0], self.library.profiles[0] * 0.1 / 2, atol=1e-6)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_loudness_never_rises_with_distance(self, seed):
        """Over every free cell and heading, total loudness is non-increasing in distance."""
        world = world_generate(seed, 8, 0.25)
        loudness = {}
        for cell in world.free_cells():
            for heading in range(4):
                audio = render_audio(world, AgentPose(cell, heading), self.library)
                loudness.setdefault(world.distance(cell), []).append(float(audio.sum()))
        distances = sorted(loudness)
        for near, far in zip(distances, distances[1:]):
            assert min(loudness[near]) >= max(loudness[far]) - 1e-5

    def test_left_ear_louder_under_noise(self):
        """Source to the left: the left ear wins in at least 99 of 100 noisy draws."""
        # from (0, 2) the first step is west; facing north puts west on the left
        rng = np.random.default_rng(0)
        wins = 0
        for _ in range(100):
            audio = render_audio(self.world, AgentPose((0, 2), 0), self.library, rng)
            wins += audio[0].sum() > audio[1].sum()
        assert wins >= 99

    def test_noisy_audio_stays_in_range(self):
        rng = np.random.default_rng(0)
        audio = render_audio(self.world, AgentPose((3, 3), 0), self.library, rng, noise_std=0.5)
        assert audio.dtype == np.float32
        assert audio.min() >= 0.0 and audio.max() <= 1.0

    def test_vision_window(self):
        """Agent on the bottom row centre; out-of-bounds reads as wall."""
        vision = render_vision(self.world, AgentPose((3, 1), 0), (8, 8))
        assert vision.shape == (8, 8, 2)
        assert vision[7, 4, 0] == 0.0
        assert vision[6, 4, 0] == 0.0
        assert vision[7, 0, 0] == 1.0
        # three free cells ahead, then the boundary
        assert vision[0, 4, 1] == pytest.approx(0.5)

    def test_turning_right_rotates_the_window(self):
        """What lay k cells to the right now lies k cells ahead."""
        world = world_generate(11, 8, 0.25)
        for cell in world.free_cells():
            before = render_vision(world, AgentPose(cell, 0), (8, 8))
            after = render_vision(world, AgentPose(cell, 1), (8, 8))
            for k in range(1, 4):
                assert after[7 - k, 4, 0] == before[7, 4 + k, 0]

    @pytest.mark.parametrize("heading", range(4))
    def test_view_is_egocentric(self, heading):
        """Rotating the world a quarter turn and the agent with it leaves the view unchanged."""
        world = world_generate(5, 8, 0.25)
        n = world.size
        rotated = GridWorld.from_occupancy(
            np.rot90(world.occupancy).copy(), (n - 1 - world.source_cell[1], world.source_cell[0])
        )
        for r, c in world.free_cells():
            view = render_vision(world, AgentPose((r, c), heading), (8, 8))
            turned = render_vision(rotated, AgentPose((n - 1 - c, r), (heading - 1) % 4), (8, 8))
            np.testing.assert_array_equal(turned, view)


class TestStep:
    """Action dynamics, rewards and termination."""

    def setup_method(self):
        self.library = SoundLibrary.synthetic()
        self.cfg = SimConfig()
        self.world = open_world()

    def _step(self, pose, action, steps_taken=0):
        return step(self.world, pose, action, library=self.library, cfg=self.cfg, steps_taken=steps_taken)

    def test_stop_on_source(self):
        result = self._step(AgentPose((0, 0), 0), Action.STOP)
        assert result.done and result.outcome == OUTCOME_SUCCESS
        assert result.reward == pytest.approx(10.0 - 0.01)

    def test_stop_elsewhere_fails(self):
        result = self._step(AgentPose((0, 1), 0), Action.STOP)
        assert result.done and result.outcome == OUTCOME_FAILURE

    def test_forward_towards_source_is_shaped(self):
        result = self._step(AgentPose((0, 1), 3), Action.FORWARD)
        assert result.moved and result.pose.cell == (0, 0)
        assert result.reward == pytest.approx(0.25 - 0.01)
        assert not result.done

    def test_forward_into_boundary(self):
        result = self._step(AgentPose((0, 1), 0), Action.FORWARD)
        assert not result.moved and result.pose.cell == (0, 1)

    def test_turns(self):
        assert self._step(AgentPose((1, 1), 0), Action.TURN_LEFT).pose.heading == 3
        assert self._step(AgentPose((1, 1), 3), Action.TURN_RIGHT).pose.heading == 0

    def test_step_cap(self):
        """The 500th action ends the episode as a failure."""
        result = self._step(AgentPose((3, 3), 0), Action.TURN_LEFT, steps_taken=499)
        assert result.done and result.outcome == OUTCOME_FAILURE

    def test_unknown_action(self):
        with pytest.raises(ValueError):
            self._step(AgentPose((1, 1), 0), 7)


class TestNavEnv:
    """Episode wrapper: splits, counters and trajectory records."""

    def setup_method(self):
        self.library = SoundLibrary.synthetic()
        self.cfg = SimConfig()

    def test_unheard_split_only_draws_unheard(self):
        env = NavEnv(self.cfg, self.library, "unheard", seed=0)
        for world_seed in range(1_000_000, 1_000_030):
            env.reset(world_seed)
            assert env.world.sound_id in self.library.unheard

    def test_start_not_on_source(self):
        for world_seed in range(20):
            world, spec = make_episode(self.cfg, self.library, "heard", world_seed)
            assert world.distance(spec.start.cell) >= 1

    def test_counters(self):
        env = NavEnv(self.cfg, self.library, seed=0)
        env.reset(5)
        env.step(Action.TURN_LEFT)
        env.step(Action.FORWARD)
        assert env.steps_taken == 2
        assert env.path_length <= 1
        assert env.start_distance == env.world.distance(env.start_pose.cell)

    def test_reset_without_seed_uses_training_range(self):
        env = NavEnv(self.cfg, self.library, seed=3)
        env.reset()
        low, high = self.cfg.train_world_seeds
        assert low <= env.world.seed < high

    def test_step_before_reset(self):
        with pytest.raises(RuntimeError):
            NavEnv(self.cfg, self.library).step(Action.STOP)

    def test_trajectory_writer(self, tmp_path):
        env = NavEnv(self.cfg, self.library, seed=0)
        env.reset(11)
        path = tmp_path / "trajectory.jsonl"
        with TrajectoryWriter(path) as writer:
            for action in (Action.TURN_RIGHT, Action.FORWARD, Action.STOP):
                result = env.step(action)
                writer.write(env.trajectory_record(action, result))
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["step_index"] for r in records] == [0, 1, 2]
        assert records[0]["action"] == "turn-right"
        assert records[-1]["done"] is True
        assert set(records[0]) == {
            "episode_id", "step_index", "cell", "heading", "action",
            "reward", "geodesic", "done", "outcome",
        }
