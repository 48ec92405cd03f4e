import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.ircam_nav.errors import ContractError
from src.ircam_nav.metrics import (
    EpisodeResult,
    min_action_count,
    shortest_action_plan,
    sna,
    spl,
    success_rate,
    summarize,
)
from src.ircam_nav.sim import DELTAS, Action, AgentPose, GridWorld, apply_action, world_generate


def success(p, l, a=10, a_star=10):
    return EpisodeResult(True, p, l, a, a_star)


def failure(p=5, l=4, a=10, a_star=6):
    return EpisodeResult(False, p, l, a, a_star)


def fixed_point_action_count(world, start):
    """Relax cost-to-go over every (cell, heading) until nothing changes."""
    states = [AgentPose(c, h) for c in world.free_cells() for h in range(4)]
    cost = {s: (1 if world.distance(s.cell) == 0 else np.inf) for s in states}
    changed = True
    while changed:
        changed = False
        for s in states:
            for action in (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT):
                nxt, _ = apply_action(world, s, action)
                if cost[nxt] + 1 < cost[s]:
                    cost[s] = cost[nxt] + 1
                    changed = True
    return cost[start]


def geodesic_action_count(world, start):
    """Fewest actions over plans that only ever step one cell closer to the source."""

    @functools.lru_cache(maxsize=None)
    def cost(cell, heading):
        here = world.distance(cell)
        if here == 0:
            return 1
        best = np.inf
        for direction, (dr, dc) in enumerate(DELTAS):
            neighbour = (cell[0] + dr, cell[1] + dc)
            if world.is_free(neighbour) and world.distance(neighbour) == here - 1:
                turn = (direction - heading) % 4
                best = min(best, min(turn, 4 - turn) + 1 + cost(neighbour, direction))
        return best

    return cost(start.cell, start.heading)


@st.composite
def episode_results(draw):
    shortest = draw(st.integers(0, 20))
    min_actions = draw(st.integers(1, 40))
    succeeded = draw(st.booleans())
    path = draw(st.integers(shortest if succeeded else 0, 60))
    actions = draw(st.integers(min_actions if succeeded else 0, 120))
    return EpisodeResult(succeeded, path, shortest, actions, min_actions)


class TestMetricValues:
    """Hand-computed SR / SPL / SNA values."""

    def test_optimal_path(self):
        assert spl([success(6, 6)]) == 1.0

    def test_double_path(self):
        assert spl([success(8, 4)]) == 0.5

    def test_mixed_set(self):
        """{p=l=4; failure; p=8, l=4} gives (1 + 0 + 0.5) / 3."""
        assert spl([success(4, 4), failure(), success(8, 4)]) == pytest.approx(0.5)

    def test_zero_length_start(self):
        """Spawning on the source contributes the success indicator."""
        assert spl([success(0, 0)]) == 1.0
        assert spl([EpisodeResult(False, 0, 0, 1, 1)]) == 0.0

    def test_sna_optimal_and_double(self):
        assert sna([success(4, 4, a=7, a_star=7)]) == 1.0
        assert sna([success(4, 4, a=14, a_star=7)]) == 0.5

    def test_success_rate(self):
        assert success_rate([failure()] * 3) == 0.0
        assert success_rate([success(4, 4)] * 2) == 1.0
        assert success_rate([success(4, 4)] * 3 + [failure()]) == 0.75

    def test_summarize_keys(self):
        assert set(summarize([success(4, 4)])) == {"sna", "sr", "spl"}

    @pytest.mark.parametrize("metric", [spl, sna, success_rate])
    def test_empty_list(self, metric):
        with pytest.raises(ContractError):
            metric([])

    def test_successful_path_shorter_than_geodesic(self):
        with pytest.raises(ContractError):
            EpisodeResult(True, 3, 4, 10, 5)

    def test_successful_episode_below_oracle(self):
        with pytest.raises(ContractError):
            EpisodeResult(True, 4, 4, 3, 5)

    @settings(max_examples=1000, deadline=None)
    @given(st.lists(episode_results(), min_size=1, max_size=20))
    def test_success_rate_bounds_weighted_metrics(self, results):
        sr = success_rate(results)
        assert 0.0 <= spl(results) <= sr <= 1.0
        assert 0.0 <= sna(results) <= sr


class TestActionOracle:
    """Minimal action counts over (cell, heading) states."""

    def setup_method(self):
        self.world = GridWorld.from_occupancy(np.zeros((4, 4), dtype=bool), (0, 0))

    def test_facing_the_source(self):
        """Two moves west and a stop."""
        plan = shortest_action_plan(self.world, AgentPose((0, 2), 3))
        assert plan == [Action.FORWARD, Action.FORWARD, Action.STOP]

    def test_facing_away(self):
        """Two turns, two moves, one stop."""
        assert min_action_count(self.world, AgentPose((0, 2), 1)) == 5

    def test_on_source(self):
        assert shortest_action_plan(self.world, AgentPose((0, 0), 2)) == [Action.STOP]

    def test_plan_reaches_source(self):
        world = world_generate(42, 8, 0.3)
        pose = AgentPose(world.free_cells()[-1], 0)
        for action in shortest_action_plan(world, pose)[:-1]:
            pose, _ = apply_action(world, pose, action)
        assert world.distance(pose.cell) == 0

    def test_matches_exhaustive_relaxation(self):
        """The oracle's action count equals a fixed-point search on 50 small worlds."""
        rng = np.random.default_rng(0)
        for seed in range(50):
            world = world_generate(seed, int(rng.integers(4, 6)), 0.3)
            cells = world.free_cells()
            start = AgentPose(cells[int(rng.integers(len(cells)))], int(rng.integers(4)))
            assert min_action_count(world, start) == fixed_point_action_count(world, start)

    def test_prefers_geodesic_among_minimal_plans(self):
        """When some action-minimal plan walks a geodesic, the oracle's plan does too."""
        rng = np.random.default_rng(1)
        geodesic_cases = 0
        for seed in range(1_000_000, 1_000_200):
            world = world_generate(seed, 8, 0.25)
            cells = world.free_cells()
            start = AgentPose(cells[int(rng.integers(len(cells)))], int(rng.integers(4)))
            plan = shortest_action_plan(world, start)
            pose, moves = start, 0
            for action in plan[:-1]:
                nxt, _ = apply_action(world, pose, action)
                moves += nxt.cell != pose.cell
                pose = nxt
            assert world.distance(pose.cell) == 0
            assert moves >= world.distance(start.cell)
            if geodesic_action_count(world, start) == len(plan):
                geodesic_cases += 1
                assert moves == world.distance(start.cell), seed
        assert geodesic_cases > 100

    def test_turns_before_a_detour(self):
        """Facing away from the source in a corridor: turn around rather than loop."""
        occupancy = np.ones((4, 4), dtype=bool)
        occupancy[0, :] = False
        world = GridWorld.from_occupancy(occupancy, (0, 0))
        plan = shortest_action_plan(world, AgentPose((0, 2), 1))
        assert plan.count(Action.FORWARD) == 2
        assert len(plan) == 5
