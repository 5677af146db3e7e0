import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tiny_policy
from errl.policy import (
    DecodeDeadEnd,
    InstanceBatch,
    MaskingError,
    PolicyConfig,
    build_policy,
    critic_value,
    decode_step,
    encode,
    entropy_from_logp,
    initial_state,
    rollout,
    run_decoder,
    score,
    score_many,
)
from errl.routing import Instance, Kind, generate_instance, generate_instances, validate


def test_config_rejects_bad_heads():
    with pytest.raises(ValueError):
        PolicyConfig(embed_dim=10, num_heads=3)


def test_encoder_permutation_equivariant():
    pol = build_policy(PolicyConfig.desk(), seed=1)
    inst = generate_instance("TSP", 12, 4)
    perm = np.random.default_rng(0).permutation(12)
    permuted = Instance(Kind.TSP, inst.coords[perm])
    a, b = encode(inst, pol), encode(permuted, pol)
    assert torch.allclose(a.nodes[perm], b.nodes, atol=1e-6)
    assert torch.allclose(a.graph, b.graph, atol=1e-6)


def test_zero_output_projections_give_residual_identity():
    pol = build_policy(PolicyConfig.desk(), seed=2)
    with torch.no_grad():
        for layer in pol.layers:
            layer.attn.out.weight.zero_()
            layer.attn.out.bias.zero_()
            layer.ff[-1].weight.zero_()
            layer.ff[-1].bias.zero_()
    inst = generate_instance("TSP", 9, 1)
    emb = encode(inst, pol)
    raw = pol.init_embed(torch.tensor(inst.coords, dtype=torch.float32))
    assert torch.equal(emb.nodes, raw)


def test_embeddings_bitwise_stable():
    inst = generate_instance("CVRP", 10, 5)
    a = encode(inst, build_policy(PolicyConfig.desk("CVRP"), seed=3))
    b = encode(inst, build_policy(PolicyConfig.desk("CVRP"), seed=3))
    assert torch.equal(a.nodes, b.nodes) and torch.equal(a.graph, b.graph)


def test_encode_rejects_wrong_kind(tiny_tsp_policy):
    with pytest.raises(ValueError):
        encode(generate_instance("CVRP", 5, 0), tiny_tsp_policy)


def test_forced_last_step_has_zero_logprob_and_entropy(tiny_tsp_policy):
    inst = generate_instance("TSP", 4, 2)
    state, cache = initial_state(inst, tiny_tsp_policy)
    for _ in range(3):
        _, _, _, state = decode_step(inst, tiny_tsp_policy, state, cache)
    action, lp, ent, state = decode_step(inst, tiny_tsp_policy, state, cache)
    assert lp == 0.0 and ent == 0.0
    assert bool(state.visited.all())


def test_dead_end_raises(tiny_tsp_policy):
    inst = generate_instance("TSP", 3, 2)
    state, cache = initial_state(inst, tiny_tsp_policy)
    for _ in range(3):
        _, _, _, state = decode_step(inst, tiny_tsp_policy, state, cache)
    with pytest.raises(DecodeDeadEnd):
        decode_step(inst, tiny_tsp_policy, state, cache)


@pytest.mark.parametrize("k", [1, 2, 5, 13])
def test_uniform_entropy_is_log_k(k):
    mask = torch.ones(1, 20, dtype=torch.bool)
    mask[0, :k] = False
    logp = torch.full((1, 20), float("-inf"), dtype=torch.float64)
    logp[0, :k] = -math.log(k)
    assert abs(float(entropy_from_logp(logp, mask)) - math.log(k)) < 1e-12


def test_entropy_of_reference_distribution():
    p = torch.tensor([[0.26, 0.28, 0.24, 0.22]], dtype=torch.float64)
    ent = float(entropy_from_logp(p.log(), torch.zeros_like(p, dtype=torch.bool)))
    # direct evaluation of -sum p ln p, frozen
    assert abs(ent - 1.3822855642311125) < 1e-12
    assert abs(ent - 1.3822) < 1e-4


def test_greedy_rollout_deterministic(tiny_cvrp_policy):
    inst = generate_instance("CVRP", 10, 3)
    a, b = rollout(inst, tiny_cvrp_policy), rollout(inst, tiny_cvrp_policy)
    assert a == b
    assert a.solution.feasible
    assert a.reward == -a.solution.total_length


def test_sampled_rollout_seeded(tiny_tsp_policy):
    inst = generate_instance("TSP", 10, 3)
    assert rollout(inst, tiny_tsp_policy, "sample", seed=4) == rollout(inst, tiny_tsp_policy, "sample", seed=4)


@pytest.mark.parametrize("kind", ["CVRP", "MRPFF"])
def test_sampled_depot_rollouts_all_feasible(kind):
    pol = build_policy(PolicyConfig.desk(kind), seed=0)
    insts = generate_instances(kind, 20, 50, seed=9)
    batch = InstanceBatch.from_instances(insts)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        out = run_decoder(pol, batch, "sample", gen, repeats=20)
    lists = out.action_lists()
    assert len(lists) == 1000
    for i, acts in enumerate(lists):
        rep = validate(insts[i // 20], acts)
        assert rep.feasible, rep.violations


def all_tsp_sequences(n):
    return [list(p) for p in itertools.permutations(range(n))]


def test_probability_mass_sums_to_one(tiny_tsp_policy):
    inst = generate_instance("TSP", 5, 8)
    seqs = all_tsp_sequences(5)
    with torch.no_grad():
        out = score_many([inst] * len(seqs), tiny_tsp_policy, seqs)
    assert abs(float(out.logprob.exp().sum()) - 1.0) < 1e-8


def test_probability_mass_cvrp_tiny():
    """Enumerate every feasible CVRP action sequence on 3 customers."""
    pol = tiny_policy(Kind.CVRP, seed=2)
    inst = Instance(Kind.CVRP, generate_instance("CVRP", 3, 1).coords, demands=[0, 6, 6, 6], capacity=12)
    seqs = []
    for perm in itertools.permutations([1, 2, 3]):
        for breaks in itertools.product([False, True], repeat=2):
            acts, load = [], 0
            ok = True
            for c, brk in zip(perm, (False, *breaks)):
                if brk:
                    acts.append(0)
                    load = 0
                acts.append(c)
                load += 6
                ok &= load <= 12
            if ok:
                seqs.append(acts)
    with torch.no_grad():
        out = score_many([inst] * len(seqs), pol, seqs)
    assert abs(float(out.logprob.exp().sum()) - 1.0) < 1e-8


def test_score_matches_rollout(tiny_cvrp_policy):
    inst = generate_instance("CVRP", 8, 6)
    for s in range(5):
        traj = rollout(inst, tiny_cvrp_policy, "sample", seed=s)
        lp, ent = score(inst, tiny_cvrp_policy, traj.solution.actions)
        assert abs(float(lp.detach()) - traj.logprob) < 1e-10
        assert abs(float(ent.detach()) - traj.entropy) < 1e-10


def test_score_rejects_masked_action(tiny_tsp_policy):
    inst = generate_instance("TSP", 4, 0)
    with pytest.raises(MaskingError):
        score(inst, tiny_tsp_policy, [0, 1, 1, 2])
    with pytest.raises(MaskingError):
        score(inst, tiny_tsp_policy, [0, 1, 2])


def test_score_rejects_capacity_violation(tiny_cvrp_policy):
    inst = Instance(Kind.CVRP, generate_instance("CVRP", 3, 1).coords, demands=[0, 6, 6, 6], capacity=12)
    with pytest.raises(MaskingError):
        score(inst, tiny_cvrp_policy, [1, 2, 3])


def test_greedy_is_stepwise_argmax_of_enumeration(tiny_tsp_policy):
    """Greedy follows the highest-probability continuation at every prefix."""
    inst = generate_instance("TSP", 5, 12)
    seqs = all_tsp_sequences(5)
    with torch.no_grad():
        lp = score_many([inst] * len(seqs), tiny_tsp_policy, seqs).logprob
    prob = {tuple(s): float(p) for s, p in zip(seqs, lp.exp())}
    prefix: tuple = ()
    for _ in range(5):
        children = {}
        for s, p in prob.items():
            if s[: len(prefix)] == prefix:
                nxt = s[len(prefix)]
                children[nxt] = children.get(nxt, 0.0) + p
        prefix = prefix + (max(sorted(children), key=lambda a: children[a]),)
    assert list(prefix) == list(rollout(inst, tiny_tsp_policy).solution.actions)


def test_critic_zero_weights():
    pol = tiny_policy()
    with torch.no_grad():
        for p in pol.critic_parameters():
            p.zero_()
    assert critic_value(generate_instance("TSP", 6, 0), pol) == 0.0


def test_critic_permutation_invariant():
    pol = build_policy(PolicyConfig.desk(), seed=5)
    inst = generate_instance("TSP", 10, 2)
    perm = np.random.default_rng(1).permutation(10)
    assert abs(critic_value(inst, pol) - critic_value(Instance(Kind.TSP, inst.coords[perm]), pol)) < 1e-6


def test_critic_regresses_to_constant_reward():
    pol = tiny_policy(seed=1)
    insts = generate_instances("TSP", 6, 64, seed=3)
    batch = InstanceBatch.from_instances(insts, torch.float64)
    opt = torch.optim.Adam(pol.critic_parameters(), lr=1e-2)
    c = -3.5
    for _ in range(500):
        opt.zero_grad()
        loss = ((pol.critic_value(pol.encode(batch)) - c) ** 2).mean()
        loss.backward()
        opt.step()
    vals = [critic_value(i, pol) for i in generate_instances("TSP", 6, 20, seed=4)]
    assert abs(np.mean(vals) - c) < 0.01 * abs(c)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(["TSP", "CVRP", "MRPFF"]))
def test_step_distributions_are_valid(seed, kind):
    pol = tiny_policy(Kind.parse(kind), seed=seed % 7)
    inst = generate_instance(kind, 7, seed)
    batch = InstanceBatch.from_instances([inst], torch.float64)
    state, cache = initial_state(inst, pol)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _ in range(20):
            if bool(state.done(batch).all()) and state.step > 0:
                break
            mask = state.mask(batch)
            logp = pol.log_probs(cache, batch, state, mask)
            p = logp.exp()
            assert abs(float(p.sum()) - 1) < 1e-9
            assert bool((p[mask] == 0).all())
            ent = float(entropy_from_logp(logp, mask))
            assert -1e-12 <= ent <= math.log(int((~mask).sum())) + 1e-12
            if kind == "CVRP":
                assert 0 <= float(state.load) <= inst.capacity
            _, _, _, state = decode_step(inst, pol, state, cache, "sample", gen)
    assert float(state.logprob_sum) <= 0


def test_mrpff_uses_exactly_one_depot_return():
    pol = build_policy(PolicyConfig.desk("MRPFF"), seed=0)
    for s in range(20):
        inst = generate_instance("MRPFF", 6, s)
        traj = rollout(inst, pol, "sample", seed=s)
        assert traj.solution.feasible
        assert list(traj.solution.actions).count(0) == 1


@pytest.mark.parametrize("seed", range(5))
def test_greedy_equals_enumerated_max_logprob_sequence(tiny_tsp_policy, seed):
    inst = generate_instance("TSP", 5, 100 + seed)
    seqs = all_tsp_sequences(5)
    with torch.no_grad():
        lp = score_many([inst] * len(seqs), tiny_tsp_policy, seqs).logprob
    assert seqs[int(lp.argmax())] == list(rollout(inst, tiny_tsp_policy).solution.actions)
