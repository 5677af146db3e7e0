"""Non-learned TSP construction baselines and the 2-opt improver."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .routing import Instance, Kind, RoutingError, Solution, validate


class UnsupportedKindError(RoutingError):
    pass


def _require_tsp(inst: Instance) -> np.ndarray:
    if inst.kind is not Kind.TSP:
        raise UnsupportedKindError(f"heuristic baselines are TSP-only, got {inst.kind.value}")
    return inst.distance_matrix()


def nearest_neighbor(inst: Instance, start: int = 0) -> Solution:
    dist = _require_tsp(inst)
    n = len(dist)
    visited = np.zeros(n, dtype=bool)
    tour = [start]
    visited[start] = True
    for _ in range(n - 1):
        d = np.where(visited, np.inf, dist[tour[-1]])
        nxt = int(np.argmin(d))
        tour.append(nxt)
        visited[nxt] = True
    return Solution.from_actions(inst, tour)


def _insert_cheapest(dist: np.ndarray, tour: list[int], node: int) -> None:
    if len(tour) < 2:
        tour.append(node)
        return
    t = np.asarray(tour)
    nxt = np.roll(t, -1)
    cost = dist[t, node] + dist[node, nxt] - dist[t, nxt]
    tour.insert(int(np.argmin(cost)) + 1, node)


def _insertion(dist: np.ndarray, order_rule: str, rng: np.random.Generator | None = None) -> list[int]:
    n = len(dist)
    in_tour = np.zeros(n, dtype=bool)
    tour: list[int] = []
    perm = rng.permutation(n) if rng is not None else None
    for i in range(n):
        if order_rule == "random":
            a = int(perm[i])
        elif i == 0:
            # nearest: arbitrary start; farthest: endpoint of the longest edge
            a = 0 if order_rule == "nearest" else int(dist.max(1).argmax())
        else:
            free = np.flatnonzero(~in_tour)
            closeness = dist[np.ix_(free, np.flatnonzero(in_tour))].min(1)
            pick = closeness.argmin() if order_rule == "nearest" else closeness.argmax()
            a = int(free[pick])
        in_tour[a] = True
        _insert_cheapest(dist, tour, a)
    return tour


def nearest_insertion(inst: Instance) -> Solution:
    return Solution.from_actions(inst, _insertion(_require_tsp(inst), "nearest"))


def farthest_insertion(inst: Instance) -> Solution:
    return Solution.from_actions(inst, _insertion(_require_tsp(inst), "farthest"))


def random_insertion(inst: Instance, seed: int = 0) -> Solution:
    dist = _require_tsp(inst)
    return Solution.from_actions(inst, _insertion(dist, "random", np.random.default_rng(seed)))


HEURISTICS = {
    "nearest_neighbor": nearest_neighbor,
    "nearest_insertion": nearest_insertion,
    "random_insertion": random_insertion,
    "farthest_insertion": farthest_insertion,
}


# --------------------------------------------------------------------------
# 2-opt


class Strategy(str, enum.Enum):
    BEST = "best-improvement"
    FIRST = "first-improvement"


@dataclass(frozen=True)
class TwoOptConfig:
    max_passes: int = 1000
    strategy: Strategy = Strategy.BEST
    epsilon: float = 1e-10

    def __post_init__(self):
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        object.__setattr__(self, "strategy", Strategy(self.strategy))


def two_opt_path(path: list[int], dist: np.ndarray, cfg: TwoOptConfig) -> tuple[list[int], int]:
    """Improve a path with fixed endpoints by segment reversals.

    Edges (p[i], p[i+1]) and (p[j], p[j+1]) are replaced by (p[i], p[j]) and
    (p[i+1], p[j+1]).  Returns the new path and the number of moves applied.
    A closed tour is handled by passing it with its first node appended.
    """
    p = np.asarray(path)
    m = len(p)
    moves = 0
    if m < 4:
        return list(p), 0
    for _ in range(cfg.max_passes):
        a, b = p[:-1], p[1:]
        d_ab = dist[a, b]
        # delta[i, j] for i < j - 1
        delta = dist[a[:, None], a[None, :]] + dist[b[:, None], b[None, :]] - d_ab[:, None] - d_ab[None, :]
        delta = np.triu(delta, k=2)
        if cfg.strategy is Strategy.BEST:
            k = int(np.argmin(delta))
            i, j = divmod(k, m - 1)
            if not delta[i, j] < -cfg.epsilon:
                break
        else:
            cand = np.argwhere(delta < -cfg.epsilon)
            if len(cand) == 0:
                break
            i, j = (int(x) for x in cand[0])
        p = np.concatenate([p[: i + 1], p[i + 1 : j + 1][::-1], p[j + 1 :]])
        moves += 1
    return [int(x) for x in p], moves


def two_opt(inst: Instance, sol: Solution, cfg: TwoOptConfig | None = None) -> Solution:
    """Local search with 2-opt moves; intra-route only for depot problems."""
    cfg = cfg or TwoOptConfig()
    report = validate(inst, sol)
    if not report.feasible:
        raise RoutingError(f"2-opt needs a feasible input: {report.violations}")
    dist = inst.distance_matrix()
    if inst.kind is Kind.TSP:
        tour = list(sol.actions)
        improved, _ = two_opt_path(tour + [tour[0]], dist, cfg)
        actions = improved[:-1]
    else:
        actions = []
        for r in sol.routes:
            improved, _ = two_opt_path([0, *r, 0], dist, cfg)
            actions.extend(improved[1:])
    out = Solution.from_actions(inst, actions)
    # float re-summation can differ in the last ulp when nothing moved
    if out.total_length > sol.total_length:
        return sol
    return out
