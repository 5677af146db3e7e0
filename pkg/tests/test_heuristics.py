import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errl.heuristics import (
    HEURISTICS,
    Strategy,
    TwoOptConfig,
    UnsupportedKindError,
    farthest_insertion,
    nearest_insertion,
    two_opt,
)
from errl.routing import Instance, Kind, RoutingError, Solution, generate_instance, tour_length, validate


def brute_force_optimum(inst):
    n = inst.num_nodes
    return min(tour_length(inst, (0, *p)) for p in itertools.permutations(range(1, n)))


def random_tour(inst, seed):
    return Solution.from_actions(inst, np.random.default_rng(seed).permutation(inst.num_nodes))


def test_three_nodes_all_heuristics_agree():
    inst = generate_instance("TSP", 3, 5)
    ref = tour_length(inst, [0, 1, 2])
    for name, fn in HEURISTICS.items():
        sol = fn(inst)
        assert abs(sol.total_length - ref) < 1e-12, name
        assert sol.feasible


@pytest.mark.parametrize("name", list(HEURISTICS))
def test_heuristics_feasible(name):
    for s in range(20):
        inst = generate_instance("TSP", 15, s)
        assert validate(inst, HEURISTICS[name](inst)).feasible


def test_heuristics_reject_non_tsp():
    inst = generate_instance("CVRP", 5, 0)
    for fn in HEURISTICS.values():
        with pytest.raises(UnsupportedKindError):
            fn(inst)


def test_insertion_deterministic():
    inst = generate_instance("TSP", 12, 1)
    assert nearest_insertion(inst).actions == nearest_insertion(inst).actions
    assert farthest_insertion(inst).actions == farthest_insertion(inst).actions
    assert HEURISTICS["random_insertion"](inst, 4) == HEURISTICS["random_insertion"](inst, 4)


def test_two_opt_uncrosses_square():
    inst = Instance(Kind.TSP, [(0, 0), (1, 0), (1, 1), (0, 1)])
    crossing = Solution.from_actions(inst, [0, 2, 1, 3])
    out = two_opt(inst, crossing)
    assert out.actions == (0, 1, 2, 3)
    assert out.total_length == 4.0


def test_two_opt_fixed_point_unchanged():
    inst = generate_instance("TSP", 12, 3)
    once = two_opt(inst, random_tour(inst, 3))
    twice = two_opt(inst, once)
    assert twice.actions == once.actions
    assert twice.total_length == once.total_length


def test_two_opt_rejects_infeasible():
    inst = generate_instance("TSP", 5, 0)
    with pytest.raises(RoutingError):
        two_opt(inst, Solution.from_actions(inst, [0, 1, 2, 2, 3], check=False))


def test_two_opt_config_validation():
    with pytest.raises(ValueError):
        TwoOptConfig(max_passes=0)
    with pytest.raises(ValueError):
        TwoOptConfig(epsilon=-1)


def test_two_opt_vs_brute_force_tsp8():
    hits = 0
    for s in range(30):
        inst = generate_instance("TSP", 8, 100 + s)
        opt = brute_force_optimum(inst)
        got = two_opt(inst, random_tour(inst, s)).total_length
        assert got >= opt - 1e-12
        hits += abs(got - opt) < 1e-9
    print(f"2-opt reached the TSP8 optimum on {hits}/30 random starts")
    assert hits > 0


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), strategy=st.sampled_from(list(Strategy)))
def test_two_opt_monotone_and_idempotent(seed, strategy):
    inst = generate_instance("TSP", 15, seed)
    cfg = TwoOptConfig(strategy=strategy)
    start = random_tour(inst, seed)
    out = two_opt(inst, start, cfg)
    assert out.total_length <= start.total_length
    assert out.feasible
    assert abs(two_opt(inst, out, cfg).total_length - out.total_length) < 1e-12


def test_two_opt_max_passes_binds():
    inst = generate_instance("TSP", 30, 9)
    start = random_tour(inst, 9)
    one = two_opt(inst, start, TwoOptConfig(max_passes=1))
    full = two_opt(inst, start)
    assert full.total_length <= one.total_length < start.total_length


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_two_opt_cvrp_intra_route(seed):
    inst = generate_instance("CVRP", 15, seed)
    rng = np.random.default_rng(seed)
    actions, load = [], 0
    for c in rng.permutation(np.arange(1, 16)):
        if load + inst.demands[c] > inst.capacity:
            actions.append(0)
            load = 0
        actions.append(int(c))
        load += inst.demands[c]
    sol = Solution.from_actions(inst, actions)
    out = two_opt(inst, sol)
    assert out.feasible
    assert out.total_length <= sol.total_length
    assert [sorted(r) for r in out.routes] == [sorted(r) for r in sol.routes]


def test_two_opt_mrpff_keeps_route_count():
    inst = generate_instance("MRPFF", 10, 2)
    sol = Solution.from_actions(inst, [5, 1, 9, 3, 0, 2, 8, 4, 10, 6, 7])
    out = two_opt(inst, sol)
    assert out.feasible and len(out.routes) == 2
    assert out.total_length <= sol.total_length
