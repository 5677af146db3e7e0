"""Inference-time solution search on top of a trained policy."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .heuristics import TwoOptConfig, two_opt
from .policy import (
    AttentionPolicy,
    DecodeDeadEnd,
    DecodeState,
    InstanceBatch,
    batch_tour_length,
    max_steps,
    run_decoder,
)
from .routing import Instance, Kind, Solution


@dataclass(frozen=True)
class SearchConfig:
    mode: str = "greedy"  # greedy | sample | beam
    k: int = 1  # samples for "sample", width for "beam"
    seed: int = 0
    post_2opt: bool = False
    two_opt_cfg: TwoOptConfig = field(default_factory=TwoOptConfig)

    def __post_init__(self):
        if self.mode not in ("greedy", "sample", "beam"):
            raise ValueError(f"unknown search mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("sample count / beam width must be >= 1")

    @classmethod
    def parse(cls, text: str, post_2opt: bool = False, seed: int = 0) -> "SearchConfig":
        """Parse ``greedy``, ``sample:K`` or ``beam:W``."""
        name, _, arg = text.strip().partition(":")
        if name == "greedy":
            if arg:
                raise ValueError("greedy takes no argument")
            return cls("greedy", 1, seed, post_2opt)
        if name == "beam" and not arg:
            return cls("beam", 10, seed, post_2opt)
        if name in ("sample", "beam") and arg.isdigit():
            return cls(name, int(arg), seed, post_2opt)
        raise ValueError(f"bad search mode {text!r}; expected greedy, sample:K or beam:W")

    @property
    def label(self) -> str:
        base = "greedy" if self.mode == "greedy" else f"{self.mode}:{self.k}"
        return base + ("+2opt" if self.post_2opt else "")


@dataclass
class SearchMetrics:
    candidates: int
    seconds: float


def _dtype(policy: AttentionPolicy) -> torch.dtype:
    return next(policy.parameters()).dtype


@torch.no_grad()
def beam_search(policy: AttentionPolicy, batch: InstanceBatch, width: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Width-``width`` beam search by cumulative log-probability.

    Returns (actions (B, W, T), logprob (B, W), length (B, W)); beams that
    never became valid carry logprob -inf.  Ties are broken towards lower
    (beam, action) index, so width 1 reproduces greedy decoding exactly.
    """
    B, N = batch.size
    W = width
    cache = policy.precompute(policy.encode(batch))
    rows_batch = batch.repeat(W)
    state = DecodeState.initial(rows_batch)
    score = torch.full((B, W), float("-inf"), dtype=_dtype(policy))
    score[:, 0] = 0.0
    history: list[torch.Tensor] = []
    for t in range(max_steps(rows_batch)):
        if t > 0 and bool(state.done(rows_batch).all()):
            break
        mask = state.mask(rows_batch)
        if bool(mask.all(1).any()):
            raise DecodeDeadEnd(f"all actions masked at step {t}")
        logp = policy.log_probs(cache, rows_batch, state, mask)  # (B*W, N)
        cand = (score.view(B * W, 1) + logp).view(B, W * N)
        order = torch.sort(cand, dim=1, descending=True, stable=True).indices[:, :W]
        parent, action = order // N, order % N
        new_score = cand.gather(1, order)
        flat_parent = (torch.arange(B)[:, None] * W + parent).view(-1)
        # dead beams (score -inf) still need a feasible action to advance
        dead = torch.isinf(new_score).view(-1)
        action = action.view(-1)
        if bool(dead.any()):
            fallback = logp[flat_parent].argmax(-1)
            action = torch.where(dead, fallback, action)
        state = state.index(flat_parent)
        lp = logp[flat_parent, action]
        ent = torch.zeros_like(lp)
        state = state.advance(rows_batch, action, lp, ent)
        history = [h[flat_parent] for h in history] + [action]
        score = new_score
    actions = torch.stack(history, 1)
    lengths = batch_tour_length(rows_batch, actions).view(B, W)
    return actions.view(B, W, -1), score, lengths


def _trim(inst: Instance, actions: list[int]) -> list[int]:
    if inst.kind is Kind.TSP:
        return actions
    while actions and actions[-1] == 0:
        actions = actions[:-1]
    return actions


@torch.no_grad()
def solve(inst: Instance, policy: AttentionPolicy, cfg: SearchConfig | None = None) -> tuple[Solution, SearchMetrics]:
    """Construct a solution with the policy, optionally refined by 2-opt."""
    cfg = cfg or SearchConfig()
    t0 = time.perf_counter()
    batch = InstanceBatch.from_instances([inst], _dtype(policy))
    if cfg.mode == "greedy":
        out = run_decoder(policy, batch, "greedy")
        actions, candidates = out.actions[0].tolist(), 1
    elif cfg.mode == "sample":
        gen = torch.Generator().manual_seed(cfg.seed)
        out = run_decoder(policy, batch, "sample", gen, repeats=cfg.k)
        best = int(torch.argmin(out.length))
        actions, candidates = out.actions[best].tolist(), cfg.k
    else:
        acts, score, lengths = beam_search(policy, batch, cfg.k)
        valid = torch.isfinite(score[0])
        masked_len = torch.where(valid, lengths[0], torch.full_like(lengths[0], float("inf")))
        best = int(torch.argmin(masked_len))
        actions, candidates = acts[0, best].tolist(), int(valid.sum())
    sol = Solution.from_actions(inst, _trim(inst, actions))
    if cfg.post_2opt:
        sol = two_opt(inst, sol, cfg.two_opt_cfg)
    return sol, SearchMetrics(candidates, time.perf_counter() - t0)


def evaluate_gap(lengths, reference_lengths) -> float:
    """Mean percentage gap ``(len / ref - 1) * 100``."""
    lengths = np.asarray(lengths, dtype=np.float64)
    refs = np.asarray(reference_lengths, dtype=np.float64)
    if lengths.shape != refs.shape:
        raise ValueError(f"length mismatch: {lengths.shape} vs {refs.shape}")
    if lengths.size == 0:
        return 0.0
    if (refs <= 0).any():
        raise ValueError("reference lengths must be positive")
    return float(np.mean((lengths / refs - 1.0) * 100.0))


def optimal_tsp(inst: Instance) -> tuple[list[int], float]:
    """Exhaustive optimum for small TSP instances (n <= 10)."""
    if inst.kind is not Kind.TSP:
        raise ValueError("exhaustive oracle is TSP-only")
    n = inst.num_nodes
    if n > 10:
        raise ValueError("exhaustive TSP oracle limited to n <= 10")
    if n <= 3:
        tour = list(range(n))
        from .routing import tour_length

        return tour, tour_length(inst, tour)
    dist = inst.distance_matrix()
    perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64)
    tours = np.concatenate([np.zeros((len(perms), 1), dtype=np.int64), perms, np.zeros((len(perms), 1), dtype=np.int64)], 1)
    lengths = dist[tours[:, :-1], tours[:, 1:]].sum(1)
    best = int(np.argmin(lengths))
    return tours[best, :-1].tolist(), float(lengths[best])
