"""Navigation metrics and the shortest-action oracle.

SR, SPL and SNA follow their standard definitions from the embodied
navigation literature (Anderson et al., "On Evaluation of Embodied Navigation
Agents"; Chen et al., "Semantic Audio-Visual Navigation" for SNA):

    SPL = mean(S_i * l_i / max(p_i, l_i))
    SNA = mean(S_i * a*_i / max(a_i, a*_i))

``p_i`` counts cell-to-cell moves only, ``a_i`` counts every action including
turns and the final stop. Episodes that start on the source (``l_i = 0``)
contribute their success indicator.
"""

import heapq
import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .errors import ContractError
from .sim import Action, AgentPose, GridWorld, apply_action


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    path_length: int
    shortest_path: int
    action_count: int
    min_action_count: int

    def __post_init__(self):
        if self.path_length < 0 or self.shortest_path < 0:
            raise ContractError(f"negative path length in {self}")
        if self.success and self.path_length < self.shortest_path:
            raise ContractError(
                f"successful path {self.path_length} shorter than geodesic "
                f"{self.shortest_path}"
            )
        if self.success and self.action_count < self.min_action_count:
            raise ContractError(
                f"successful episode used {self.action_count} actions, below the "
                f"oracle minimum {self.min_action_count}"
            )

    @property
    def spl(self) -> float:
        if not self.success:
            return 0.0
        if self.shortest_path == 0:
            return 1.0
        return self.shortest_path / max(self.path_length, self.shortest_path)

    @property
    def sna(self) -> float:
        if not self.success:
            return 0.0
        return self.min_action_count / max(self.action_count, self.min_action_count)


def _require(results: Sequence[EpisodeResult], metric: str) -> None:
    if not results:
        raise ContractError(f"{metric} of an empty result list is undefined")


def success_rate(results: Sequence[EpisodeResult]) -> float:
    _require(results, "success_rate")
    return sum(1.0 for r in results if r.success) / len(results)


def spl(results: Sequence[EpisodeResult]) -> float:
    _require(results, "spl")
    return sum(r.spl for r in results) / len(results)


def sna(results: Sequence[EpisodeResult]) -> float:
    _require(results, "sna")
    return sum(r.sna for r in results) / len(results)


def summarize(results: Sequence[EpisodeResult]) -> Dict[str, float]:
    return {"sna": sna(results), "sr": success_rate(results), "spl": spl(results)}


def shortest_action_plan(world: GridWorld, start: AgentPose) -> List[int]:
    """Minimal action sequence (moves, turns, final stop) from ``start`` to
    stopping on the source.

    Among plans with the fewest actions the one with the fewest cell moves is
    returned, so the oracle also walks a geodesic whenever one is action-minimal.
    Uniform-cost search over (cell, heading) ordered by (actions, moves).
    """
    best: Dict[AgentPose, Tuple[int, int]] = {start: (0, 0)}
    parents: Dict[AgentPose, Optional[Tuple[AgentPose, int]]] = {start: None}
    order = itertools.count()
    frontier = [(0, 0, next(order), start)]
    goal: Optional[AgentPose] = None
    while frontier:
        n_actions, n_moves, _, pose = heapq.heappop(frontier)
        if (n_actions, n_moves) != best[pose]:
            continue
        if world.distance(pose.cell) == 0:
            goal = pose
            break
        for action in (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT):
            nxt, _ = apply_action(world, pose, action)
            if nxt == pose:
                continue
            cost = (n_actions + 1, n_moves + int(nxt.cell != pose.cell))
            if nxt not in best or cost < best[nxt]:
                best[nxt] = cost
                parents[nxt] = (pose, int(action))
                heapq.heappush(frontier, (*cost, next(order), nxt))
    if goal is None:
        raise ContractError(f"source unreachable from {start}")
    plan = [int(Action.STOP)]
    node = goal
    while parents[node] is not None:
        node, action = parents[node]
        plan.append(action)
    plan.reverse()
    return plan


def min_action_count(world: GridWorld, start: AgentPose) -> int:
    return len(shortest_action_plan(world, start))
