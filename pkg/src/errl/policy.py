"""Attention encoder-decoder construction policy with masked decoding.

The policy follows the transformer-style attention model for routing: node
features are embedded, passed through a stack of multi-head self-attention
layers, and decoded autoregressively.  At each step the decoder context is
``graph ⊕ first ⊕ last (⊕ problem scalar)``; one multi-head glimpse over the
nodes is followed by a single-head compatibility layer with tanh clipping.
Infeasible actions get ``-inf`` logits.

All decoding runs batched.  Single-instance helpers (``encode``,
``decode_step``, ``rollout``, ``score``, ``critic_value``) wrap the batched
machinery.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .routing import Instance, Kind, Solution

CHECKPOINT_VERSION = 1


class DecodeDeadEnd(RuntimeError):
    """Every action is masked; unreachable for valid instances."""


class MaskingError(ValueError):
    """A teacher-forced action violates the feasibility mask."""


@dataclass(frozen=True)
class PolicyConfig:
    kind: Kind = Kind.TSP
    embed_dim: int = 128
    num_layers: int = 3
    num_heads: int = 8
    ff_dim: int = 512
    tanh_clip: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @classmethod
    def desk(cls, kind: "Kind | str" = Kind.TSP) -> "PolicyConfig":
        return cls(kind=kind, embed_dim=64, num_layers=2, num_heads=8, ff_dim=256)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------------
# Batched instance tensors and decoding state


@dataclass
class InstanceBatch:
    kind: Kind
    coords: torch.Tensor  # (B, N, 2)
    demand: torch.Tensor | None = None  # (B, N), units of goods, depot 0
    capacity: torch.Tensor | None = None  # (B,)
    num_routes: int = 1

    @classmethod
    def from_instances(cls, insts: Sequence[Instance], dtype=torch.float32) -> "InstanceBatch":
        kind = insts[0].kind
        if any(i.kind is not kind or i.num_nodes != insts[0].num_nodes for i in insts):
            raise ValueError("a batch needs instances of one kind and size")
        coords = torch.tensor(np.stack([i.coords for i in insts]), dtype=dtype)
        demand = capacity = None
        routes = 1
        if kind is Kind.CVRP:
            demand = torch.as_tensor(np.stack([i.demands for i in insts]), dtype=dtype)
            capacity = torch.as_tensor([float(i.capacity) for i in insts], dtype=dtype)
        elif kind is Kind.MRPFF:
            routes = insts[0].num_routes
            if any(i.num_routes != routes for i in insts):
                raise ValueError("a batch needs one fleet size")
        return cls(kind, coords, demand, capacity, routes)

    @property
    def size(self) -> tuple[int, int]:
        return self.coords.shape[0], self.coords.shape[1]

    def index(self, idx: torch.Tensor) -> "InstanceBatch":
        return InstanceBatch(
            self.kind,
            self.coords[idx],
            None if self.demand is None else self.demand[idx],
            None if self.capacity is None else self.capacity[idx],
            self.num_routes,
        )

    def repeat(self, times: int) -> "InstanceBatch":
        """Each instance repeated ``times`` consecutively."""
        idx = torch.arange(self.size[0]).repeat_interleave(times)
        return self.index(idx)

    def to(self, dtype) -> "InstanceBatch":
        return InstanceBatch(
            self.kind,
            self.coords.to(dtype),
            None if self.demand is None else self.demand.to(dtype),
            None if self.capacity is None else self.capacity.to(dtype),
            self.num_routes,
        )


@dataclass
class DecodeState:
    """Per-row decoding context for a batch of partial solutions.

    ``current``/``first`` are -1 before the first TSP step.  ``load`` is the
    remaining vehicle load (CVRP); ``routes_left`` counts the depot returns
    still to make (MRPFF).
    """

    visited: torch.Tensor  # (B, N) bool
    current: torch.Tensor  # (B,) long
    first: torch.Tensor  # (B,) long
    load: torch.Tensor  # (B,) float
    routes_left: torch.Tensor  # (B,) long
    step: int
    logprob_sum: torch.Tensor  # (B,)
    entropy_sum: torch.Tensor  # (B,)
    n_steps: torch.Tensor  # (B,) long, real (unpadded) steps

    @classmethod
    def initial(cls, batch: InstanceBatch) -> "DecodeState":
        B, N = batch.size
        dtype = batch.coords.dtype
        visited = torch.zeros(B, N, dtype=torch.bool)
        if batch.kind is Kind.TSP:
            current = torch.full((B,), -1, dtype=torch.long)
        else:
            visited[:, 0] = True  # the depot is never "visited" as a customer
            current = torch.zeros(B, dtype=torch.long)
        load = batch.capacity.clone() if batch.capacity is not None else torch.zeros(B, dtype=dtype)
        routes_left = torch.full((B,), batch.num_routes - 1, dtype=torch.long)
        zeros = torch.zeros(B, dtype=dtype)
        return cls(visited, current, current.clone(), load, routes_left, 0, zeros, zeros.clone(),
                   torch.zeros(B, dtype=torch.long))

    def index(self, idx: torch.Tensor) -> "DecodeState":
        return replace(
            self,
            visited=self.visited[idx],
            current=self.current[idx],
            first=self.first[idx],
            load=self.load[idx],
            routes_left=self.routes_left[idx],
            logprob_sum=self.logprob_sum[idx],
            entropy_sum=self.entropy_sum[idx],
            n_steps=self.n_steps[idx],
        )

    def done(self, batch: InstanceBatch) -> torch.Tensor:
        if batch.kind is Kind.TSP:
            return self.visited.all(1)
        return self.visited[:, 1:].all(1)

    def mask(self, batch: InstanceBatch) -> torch.Tensor:
        """Boolean (B, N); True marks an infeasible action."""
        mask = self.visited.clone()
        if batch.kind is Kind.TSP:
            return mask
        at_depot = self.current == 0
        done = self.done(batch)
        if batch.kind is Kind.CVRP:
            mask[:, 1:] |= batch.demand[:, 1:] > self.load[:, None]
            depot_blocked = at_depot & ~done
        else:
            unvisited = (~self.visited[:, 1:]).sum(1)
            # each route still to open needs at least one customer
            mask[:, 1:] |= (unvisited <= self.routes_left)[:, None]
            depot_blocked = (at_depot | (self.routes_left < 1)) & ~done
        mask[:, 0] = depot_blocked
        # finished rows idle at the depot
        mask[done] = True
        mask[done, 0] = False
        return mask

    def advance(self, batch: InstanceBatch, action: torch.Tensor, logp: torch.Tensor, ent: torch.Tensor) -> "DecodeState":
        rows = torch.arange(action.shape[0])
        active = ~self.done(batch)
        visited = self.visited.clone()
        visited[rows, action] = True
        if batch.kind is not Kind.TSP:
            visited[:, 0] = True
        first = torch.where(self.first < 0, action, self.first)
        load, routes_left = self.load, self.routes_left
        if batch.kind is Kind.CVRP:
            served = batch.demand[rows, action]
            load = torch.where(action == 0, batch.capacity, self.load - served)
        elif batch.kind is Kind.MRPFF:
            routes_left = self.routes_left - ((action == 0) & active).long()
        return DecodeState(
            visited, action, first, load, routes_left, self.step + 1,
            self.logprob_sum + logp, self.entropy_sum + ent, self.n_steps + active.long(),
        )


# --------------------------------------------------------------------------
# Model


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, d = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.heads), -1)
        return self.out((att @ v).transpose(1, 2).reshape(B, N, d))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block with residuals."""

    def __init__(self, d: int, heads: int, ff: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.ReLU(), nn.Linear(ff, d))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = h + self.attn(self.norm1(h))
        return h + self.ff(self.norm2(h))


@dataclass
class Embeddings:
    nodes: torch.Tensor  # (B, N, d)
    graph: torch.Tensor  # (B, d)


@dataclass
class DecoderCache:
    """Per-instance tensors reused at every decode step."""

    glimpse_k: torch.Tensor  # (B, H, N, dh)
    glimpse_v: torch.Tensor
    logit_k: torch.Tensor  # (B, N, d)
    fixed_ctx: torch.Tensor  # (B, d)
    ctx_first: torch.Tensor  # (B, N, d) first-node part of the step context
    ctx_last: torch.Tensor  # (B, N, d)

    def index(self, idx: torch.Tensor) -> "DecoderCache":
        return DecoderCache(*(t[idx] for t in (self.glimpse_k, self.glimpse_v, self.logit_k,
                                               self.fixed_ctx, self.ctx_first, self.ctx_last)))


class AttentionPolicy(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        if cfg.kind is Kind.TSP:
            self.init_embed = nn.Linear(2, d)
        else:
            self.depot_embed = nn.Linear(2, d)
            self.init_embed = nn.Linear(3 if cfg.kind is Kind.CVRP else 2, d)
        self.layers = nn.ModuleList(EncoderLayer(d, cfg.num_heads, cfg.ff_dim) for _ in range(cfg.num_layers))
        self.placeholder = nn.Parameter(torch.empty(2 * d).uniform_(-1, 1))
        extra = 0 if cfg.kind is Kind.TSP else 1
        self.project_node_kv = nn.Linear(d, 3 * d, bias=False)
        self.project_fixed = nn.Linear(d, d, bias=False)
        self.project_step = nn.Linear(2 * d + extra, d, bias=False)
        self.project_out = nn.Linear(d, d, bias=False)
        self.critic = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, 1))

    # -- parameter groups --------------------------------------------------
    def actor_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if not n.startswith("critic.")]

    def critic_parameters(self) -> list[nn.Parameter]:
        return list(self.critic.parameters())

    # -- encoder -----------------------------------------------------------
    def encode(self, batch: InstanceBatch) -> Embeddings:
        if batch.kind is not self.cfg.kind:
            raise ValueError(f"policy built for {self.cfg.kind.value}, got {batch.kind.value}")
        if batch.kind is Kind.TSP:
            h = self.init_embed(batch.coords)
        else:
            cust = batch.coords[:, 1:]
            if batch.kind is Kind.CVRP:
                frac = batch.demand[:, 1:] / batch.capacity[:, None]
                cust = torch.cat([cust, frac[..., None]], -1)
            h = torch.cat([self.depot_embed(batch.coords[:, :1]), self.init_embed(cust)], 1)
        for layer in self.layers:
            h = layer(h)
        return Embeddings(h, h.mean(1))

    def precompute(self, emb: Embeddings) -> DecoderCache:
        B, N, d = emb.nodes.shape
        H = self.cfg.num_heads
        gk, gv, lk = self.project_node_kv(emb.nodes).chunk(3, dim=-1)
        # the step context is linear in first/last embeddings: project once
        w = self.project_step.weight
        ctx_first = emb.nodes @ w[:, :d].T
        ctx_last = emb.nodes @ w[:, d : 2 * d].T
        return DecoderCache(
            gk.reshape(B, N, H, d // H).transpose(1, 2).contiguous(),
            gv.reshape(B, N, H, d // H).transpose(1, 2).contiguous(),
            lk.contiguous(),
            self.project_fixed(emb.graph),
            ctx_first,
            ctx_last,
        )

    # -- decoder -----------------------------------------------------------
    def _step_context(self, cache: DecoderCache, batch: InstanceBatch, state: DecodeState) -> torch.Tensor:
        """Per-row step context (B, R, d)."""
        B, N, d = cache.ctx_first.shape
        R = state.current.shape[0] // B
        w = self.project_step.weight
        if state.step == 0 and batch.kind is Kind.TSP:
            ctx = (self.placeholder @ w[:, : 2 * d].T).expand(B, R, d)
        else:
            inst = torch.arange(B)[:, None]
            ctx = cache.ctx_first[inst, state.first.view(B, R)] + cache.ctx_last[inst, state.current.view(B, R)]
        if batch.kind is Kind.CVRP:
            scalar = state.load / batch.capacity
        elif batch.kind is Kind.MRPFF:
            scalar = state.routes_left.to(ctx.dtype) / batch.num_routes
        else:
            return ctx
        return ctx + scalar.view(B, R, 1) * w[:, 2 * d]

    def log_probs(self, cache: DecoderCache, batch: InstanceBatch, state: DecodeState, mask: torch.Tensor) -> torch.Tensor:
        """Masked log-probabilities (B*R, N) for R rows per cached instance.

        Rows of the state are grouped instance-major: rows ``i*R .. i*R+R-1``
        all decode instance ``i`` of the cache.  Masked entries are -inf.
        """
        B, H, N, dh = cache.glimpse_k.shape
        R = state.current.shape[0] // B
        q = cache.fixed_ctx[:, None, :] + self._step_context(cache, batch, state)  # (B, R, d)
        q = q.view(B, R, H, dh).transpose(1, 2)  # (B, H, R, dh)
        m = mask.view(B, R, N)
        compat = (q @ cache.glimpse_k.transpose(-1, -2)) / math.sqrt(dh)  # (B, H, R, N)
        compat = compat.masked_fill(m[:, None], float("-inf"))
        glimpse = (torch.softmax(compat, -1) @ cache.glimpse_v).transpose(1, 2).reshape(B, R, H * dh)
        glimpse = self.project_out(glimpse)
        logits = (glimpse @ cache.logit_k.transpose(-1, -2)) / math.sqrt(H * dh)  # (B, R, N)
        logits = self.cfg.tanh_clip * torch.tanh(logits)
        logits = logits.masked_fill(m, float("-inf"))
        return F.log_softmax(logits, -1).view(B * R, N)

    def critic_value(self, emb: Embeddings) -> torch.Tensor:
        """Scalar baseline per instance from the (detached) graph embedding."""
        return self.critic(emb.graph.detach()).squeeze(-1)


def entropy_from_logp(logp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """-Σ p ln p over unmasked actions, in nats."""
    safe = logp.masked_fill(mask, 0.0)
    return -(safe.exp() * safe).masked_fill(mask, 0.0).sum(-1)


def max_steps(batch: InstanceBatch) -> int:
    n = batch.size[1]
    if batch.kind is Kind.TSP:
        return n
    if batch.kind is Kind.MRPFF:
        return (n - 1) + batch.num_routes - 1
    return 2 * (n - 1)


# --------------------------------------------------------------------------
# Batched rollouts


@dataclass
class RolloutBatch:
    actions: torch.Tensor  # (B, T) long; depot-padded for depot problems
    logprob: torch.Tensor  # (B,)
    entropy: torch.Tensor  # (B,) summed per-step entropy, nats
    n_steps: torch.Tensor  # (B,) real decode steps
    length: torch.Tensor  # (B,) tour length

    @property
    def mean_entropy(self) -> torch.Tensor:
        """Per-trajectory entropy normalized by its number of steps."""
        return self.entropy / self.n_steps.clamp(min=1).to(self.entropy.dtype)

    def action_lists(self) -> list[list[int]]:
        """Unpadded action sequences, one per row."""
        return [row[:n] for row, n in zip(self.actions.tolist(), self.n_steps.tolist())]


def batch_tour_length(batch: InstanceBatch, actions: torch.Tensor) -> torch.Tensor:
    B = actions.shape[0]
    if batch.kind is not Kind.TSP:
        depot = torch.zeros(B, 1, dtype=torch.long)
        actions = torch.cat([depot, actions, depot], 1)
    else:
        actions = torch.cat([actions, actions[:, :1]], 1)
    pts = batch.coords.gather(1, actions[..., None].expand(-1, -1, 2))
    return (pts[:, 1:] - pts[:, :-1]).norm(dim=-1).sum(1)


def run_decoder(
    policy: AttentionPolicy,
    batch: InstanceBatch,
    mode: str = "greedy",
    generator: torch.Generator | None = None,
    repeats: int = 1,
    forced: torch.Tensor | None = None,
    cache: DecoderCache | None = None,
) -> RolloutBatch:
    """Decode complete solutions for every row of ``batch``.

    ``mode`` is "greedy" or "sample"; with ``forced`` (B*repeats, T) the given
    actions are teacher-forced and scored.  ``repeats`` decodes several
    trajectories per instance from one encoder pass.
    """
    if cache is None:
        cache = policy.precompute(policy.encode(batch))
    if repeats > 1:
        batch = batch.repeat(repeats)
    state = DecodeState.initial(batch)
    B = batch.size[0]
    rows = torch.arange(B)
    steps = []
    T = max_steps(batch)
    for t in range(T):
        if t > 0 and bool(state.done(batch).all()):
            break
        mask = state.mask(batch)
        if bool(mask.all(1).any()):
            raise DecodeDeadEnd(f"all actions masked at step {t}")
        logp = policy.log_probs(cache, batch, state, mask)
        if forced is not None:
            if t < forced.shape[1]:
                action = forced[:, t]
            else:
                action = torch.zeros(B, dtype=torch.long)
            if bool(mask[rows, action].any()):
                bad = int(mask[rows, action].nonzero()[0])
                raise MaskingError(f"action {int(action[bad])} is masked at step {t} in row {bad}")
        elif mode == "greedy":
            action = logp.argmax(-1)
        elif mode == "sample":
            action = torch.multinomial(logp.exp(), 1, generator=generator).squeeze(1)
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        ent = entropy_from_logp(logp, mask)
        state = state.advance(batch, action, logp[rows, action], ent)
        steps.append(action)
    if forced is not None and forced.shape[1] > len(steps):
        tail = forced[:, len(steps):]
        if batch.kind is Kind.TSP or bool((tail != 0).any()):
            raise MaskingError("forced sequence longer than a complete solution")
    if not bool(state.done(batch).all()):
        raise MaskingError("sequence ended before the solution was complete")
    actions = torch.stack(steps, 1)
    return RolloutBatch(actions, state.logprob_sum, state.entropy_sum, state.n_steps,
                        batch_tour_length(batch, actions))


# --------------------------------------------------------------------------
# Single-instance API


def _param_dtype(policy: AttentionPolicy) -> torch.dtype:
    return next(policy.parameters()).dtype


@dataclass
class Trajectory:
    solution: Solution
    logprob: float
    entropy: float  # summed per-step entropy, nats
    n_steps: int

    @property
    def reward(self) -> float:
        return -self.solution.total_length


def encode(inst: Instance, policy: AttentionPolicy) -> Embeddings:
    batch = InstanceBatch.from_instances([inst], _param_dtype(policy))
    emb = policy.encode(batch)
    return Embeddings(emb.nodes[0], emb.graph[0])


@torch.no_grad()
def decode_step(
    inst: Instance,
    policy: AttentionPolicy,
    state: DecodeState,
    cache: DecoderCache,
    mode: str = "greedy",
    generator: torch.Generator | None = None,
) -> tuple[int, float, float, DecodeState]:
    """One decoding step for a single-row state; returns (action, logp, entropy, next state)."""
    batch = InstanceBatch.from_instances([inst], _param_dtype(policy))
    mask = state.mask(batch)
    if bool(mask.all()):
        raise DecodeDeadEnd("all actions masked")
    logp = policy.log_probs(cache, batch, state, mask)
    if mode == "greedy":
        action = logp.argmax(-1)
    else:
        action = torch.multinomial(logp.exp(), 1, generator=generator).squeeze(1)
    ent = entropy_from_logp(logp, mask)
    lp = logp[0, action]
    nxt = state.advance(batch, action, lp, ent)
    return int(action), float(lp), float(ent), nxt


def initial_state(inst: Instance, policy: AttentionPolicy) -> tuple[DecodeState, DecoderCache]:
    batch = InstanceBatch.from_instances([inst], _param_dtype(policy))
    return DecodeState.initial(batch), policy.precompute(policy.encode(batch))


def _to_trajectories(insts: Sequence[Instance], out: RolloutBatch) -> list[Trajectory]:
    trajs = []
    for inst, acts, lp, ent, n in zip(insts, out.action_lists(), out.logprob.tolist(),
                                      out.entropy.tolist(), out.n_steps.tolist()):
        trajs.append(Trajectory(Solution.from_actions(inst, acts), lp, ent, n))
    return trajs


@torch.no_grad()
def rollout(inst: Instance, policy: AttentionPolicy, mode: str = "greedy", seed: int | None = None) -> Trajectory:
    gen = None
    if mode == "sample":
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
    batch = InstanceBatch.from_instances([inst], _param_dtype(policy))
    return _to_trajectories([inst], run_decoder(policy, batch, mode, gen))[0]


@torch.no_grad()
def rollout_many(insts: Sequence[Instance], policy: AttentionPolicy, mode: str = "greedy",
                 seed: int | None = None) -> list[Trajectory]:
    gen = torch.Generator().manual_seed(0 if seed is None else seed) if mode == "sample" else None
    batch = InstanceBatch.from_instances(insts, _param_dtype(policy))
    return _to_trajectories(insts, run_decoder(policy, batch, mode, gen))


def score(inst: Instance, policy: AttentionPolicy, actions: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher-forced (logprob, summed entropy) of ``actions``; differentiable."""
    out = score_many([inst], policy, [actions])
    return out.logprob[0], out.entropy[0]


def score_many(insts: Sequence[Instance], policy: AttentionPolicy, action_lists: Sequence[Sequence[int]]) -> RolloutBatch:
    batch = InstanceBatch.from_instances(insts, _param_dtype(policy))
    T = max(len(a) for a in action_lists)
    forced = torch.zeros(len(action_lists), T, dtype=torch.long)
    for i, a in enumerate(action_lists):
        forced[i, : len(a)] = torch.as_tensor(list(a), dtype=torch.long)
    return run_decoder(policy, batch, forced=forced)


@torch.no_grad()
def critic_value(inst: Instance, policy: AttentionPolicy) -> float:
    batch = InstanceBatch.from_instances([inst], _param_dtype(policy))
    return float(policy.critic_value(policy.encode(batch))[0])


def assert_finite(policy: nn.Module) -> None:
    for name, p in policy.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite values in parameter {name}")


def build_policy(cfg: PolicyConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> AttentionPolicy:
    torch.manual_seed(seed)
    return AttentionPolicy(cfg).to(dtype)
