"""Entropy-regularized policy-gradient trainers.

ERRL1 samples N trajectories per instance and uses their mean reward as the
shared baseline; ERRL2 samples one trajectory per instance and uses a learned
critic.  Both add ``alpha`` times the (length-normalized) trajectory entropy
to the surrogate objective.  Rewards are negative tour lengths.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .policy import (
    CHECKPOINT_VERSION,
    AttentionPolicy,
    InstanceBatch,
    PolicyConfig,
    RolloutBatch,
    assert_finite,
    build_policy,
    run_decoder,
)
from .routing import Kind, default_capacity

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["epoch", "mean_val_length", "mean_entropy", "baseline_mean", "grad_norm", "seconds"]
# stream tags keep training, validation and sampling seeds disjoint
_TRAIN_STREAM, _VAL_STREAM = 0, 1


class NumericalError(FloatingPointError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    kind: str = "TSP"
    n: int = 20
    trainer: str = "ERRL1"
    alpha: float = 0.3
    lr: float = 1e-4
    batch_size: int = 64
    traj_per_instance: int = 8
    epochs: int = 200
    steps_per_epoch: int = 100
    grad_clip_norm: float = 2.0
    lr_decay: float = 1.0  # multiplicative factor every lr_decay_every steps
    lr_decay_every: int = 5000
    weight_decay: float = 0.0
    baseline: str = "mean"  # "mean" of the N samples, or "greedy" rollout
    entropy_in_reward: bool = False
    val_size: int = 1000
    seed: int = 0
    capacity: int | None = None
    num_routes: int = 2
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 8
    ff_dim: int = 256

    def __post_init__(self):
        self.kind = Kind.parse(self.kind).value
        self.trainer = self.trainer.upper()
        if self.trainer not in ("ERRL1", "ERRL2"):
            raise ValueError(f"unknown trainer {self.trainer!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.trainer == "ERRL1" and self.traj_per_instance < 2 and self.baseline == "mean":
            raise ValueError("ERRL1 with a shared baseline needs at least 2 trajectories per instance")
        if self.baseline not in ("mean", "greedy"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        for name in ("lr", "batch_size", "epochs", "steps_per_epoch", "grad_clip_norm", "val_size", "n"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def policy_config(self) -> PolicyConfig:
        return PolicyConfig(kind=self.kind, embed_dim=self.embed_dim, num_layers=self.num_layers,
                            num_heads=self.num_heads, ff_dim=self.ff_dim)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def resume_key(self) -> dict:
        """Fields that must match for a checkpoint to be resumable."""
        d = asdict(self)
        d.pop("epochs")
        return d


@dataclass
class StepMetrics:
    loss: float
    mean_length: float
    mean_entropy: float  # per decode step, nats
    baseline_mean: float
    grad_norm: float  # before clipping
    critic_loss: float = float("nan")


@dataclass
class EpochMetrics:
    epoch: int
    mean_val_length: float
    mean_entropy: float
    baseline_mean: float
    grad_norm: float
    seconds: float


@dataclass
class TrainReport:
    config: TrainConfig
    epochs: list[EpochMetrics] = field(default_factory=list)
    checkpoint_path: str | None = None

    @property
    def final_val_length(self) -> float:
        return self.epochs[-1].mean_val_length


# --------------------------------------------------------------------------
# Instance streams


def random_batch(kind: "Kind | str", n: int, size: int, rng: np.random.Generator,
                 capacity: int | None = None, num_routes: int = 2, dtype=torch.float32) -> InstanceBatch:
    """Uniform instances drawn directly as tensors (same law as generate_instance)."""
    kind = Kind.parse(kind)
    if kind is Kind.TSP:
        return InstanceBatch(kind, torch.as_tensor(rng.random((size, n, 2)), dtype=dtype))
    coords = torch.as_tensor(rng.random((size, n + 1, 2)), dtype=dtype)
    if kind is Kind.MRPFF:
        return InstanceBatch(kind, coords, num_routes=num_routes)
    demand = np.concatenate([np.zeros((size, 1)), rng.integers(1, 10, size=(size, n))], 1)
    cap = default_capacity(n) if capacity is None else capacity
    return InstanceBatch(kind, coords, torch.as_tensor(demand, dtype=dtype),
                         torch.full((size,), float(cap), dtype=dtype))


def train_batch(cfg: TrainConfig, epoch: int, step: int, dtype=torch.float32) -> InstanceBatch:
    rng = np.random.default_rng([cfg.seed, _TRAIN_STREAM, epoch, step])
    return random_batch(cfg.kind, cfg.n, cfg.batch_size, rng, cfg.capacity, cfg.num_routes, dtype)


def validation_batch(cfg: TrainConfig, epoch: int, dtype=torch.float32) -> InstanceBatch:
    rng = np.random.default_rng([cfg.seed, _VAL_STREAM, epoch])
    return random_batch(cfg.kind, cfg.n, cfg.val_size, rng, cfg.capacity, cfg.num_routes, dtype)


# --------------------------------------------------------------------------
# Surrogate objectives


def errl1_objective(policy: AttentionPolicy, batch: InstanceBatch, cfg: TrainConfig,
                    generator: torch.Generator | None) -> tuple[torch.Tensor, RolloutBatch, torch.Tensor]:
    """Surrogate J whose gradient is the ERRL1 estimator; returns (J, rollouts, baseline).

    J = 1/(NB) Σ_i Σ_j [ (R_ij - b_i).detach() · log P(l_ij) + α · H(l_ij) ]
    """
    N = cfg.traj_per_instance
    B = batch.size[0]
    out = run_decoder(policy, batch, "sample", generator, repeats=N)
    reward = -out.length.view(B, N)
    ent = out.mean_entropy.view(B, N)
    if cfg.entropy_in_reward:
        reward = reward + cfg.alpha * ent.detach()
    if cfg.baseline == "mean":
        base = reward.mean(1, keepdim=True)
    else:
        with torch.no_grad():
            greedy = run_decoder(policy, batch, "greedy")
        base = -greedy.length.view(B, 1)
        if cfg.entropy_in_reward:
            base = base + cfg.alpha * greedy.mean_entropy.view(B, 1)
    adv = (reward - base).detach()
    J = (adv * out.logprob.view(B, N)).mean()
    if not cfg.entropy_in_reward:
        J = J + cfg.alpha * ent.mean()
    return J, out, base.detach()


def errl2_objective(policy: AttentionPolicy, batch: InstanceBatch, cfg: TrainConfig,
                    generator: torch.Generator | None) -> tuple[torch.Tensor, torch.Tensor, RolloutBatch, torch.Tensor]:
    """Actor surrogate J and critic loss for one sampled trajectory per instance."""
    emb = policy.encode(batch)
    out = run_decoder(policy, batch, "sample", generator, cache=policy.precompute(emb))
    value = policy.critic_value(emb)
    reward = -out.length
    ent = out.mean_entropy
    if cfg.entropy_in_reward:
        reward = reward + cfg.alpha * ent.detach()
    adv = (reward - value).detach()
    J = (adv * out.logprob).mean()
    if not cfg.entropy_in_reward:
        J = J + cfg.alpha * ent.mean()
    critic_loss = ((reward.detach() - value) ** 2).mean()
    return J, critic_loss, out, value.detach()


# --------------------------------------------------------------------------
# Optimizer steps


@dataclass
class Optimizers:
    actor: torch.optim.Optimizer
    critic: torch.optim.Optimizer | None
    schedulers: list

    def state_dict(self) -> dict:
        return {
            "actor": self.actor.state_dict(),
            "critic": None if self.critic is None else self.critic.state_dict(),
            "schedulers": [s.state_dict() for s in self.schedulers],
        }

    def load_state_dict(self, d: dict) -> None:
        self.actor.load_state_dict(d["actor"])
        if self.critic is not None:
            self.critic.load_state_dict(d["critic"])
        for s, sd in zip(self.schedulers, d["schedulers"]):
            s.load_state_dict(sd)

    def step_schedulers(self) -> None:
        for s in self.schedulers:
            s.step()


def make_optimizers(policy: AttentionPolicy, cfg: TrainConfig) -> Optimizers:
    actor = torch.optim.Adam(policy.actor_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    critic = None
    if cfg.trainer == "ERRL2":
        critic = torch.optim.Adam(policy.critic_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheds = []
    if cfg.lr_decay != 1.0:
        for opt in (actor, critic):
            if opt is not None:
                scheds.append(torch.optim.lr_scheduler.StepLR(opt, cfg.lr_decay_every, cfg.lr_decay))
    return Optimizers(actor, critic, scheds)


def _check_grads(params, batch: InstanceBatch, dump_dir: str | None) -> None:
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            path = None
            if dump_dir:
                path = os.path.join(dump_dir, "nonfinite_batch.pt")
                torch.save({"coords": batch.coords, "demand": batch.demand, "capacity": batch.capacity}, path)
            raise NumericalError(f"non-finite gradient; offending batch dumped to {path}")


def _clip(params, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


def errl1_step(policy: AttentionPolicy, opts: Optimizers, batch: InstanceBatch, cfg: TrainConfig,
               generator: torch.Generator | None, dump_dir: str | None = None) -> StepMetrics:
    params = policy.actor_parameters()
    opts.actor.zero_grad(set_to_none=True)
    J, out, base = errl1_objective(policy, batch, cfg, generator)
    (-J).backward()
    _check_grads(params, batch, dump_dir)
    gnorm = _clip(params, cfg.grad_clip_norm)
    opts.actor.step()
    opts.step_schedulers()
    assert_finite(policy)
    steps = out.n_steps.sum().clamp(min=1)
    return StepMetrics(-float(J.detach()), float(out.length.detach().mean()), float(out.entropy.detach().sum() / steps),
                       float(-base.mean()), gnorm)


def errl2_step(policy: AttentionPolicy, opts: Optimizers, batch: InstanceBatch, cfg: TrainConfig,
               generator: torch.Generator | None, dump_dir: str | None = None) -> StepMetrics:
    if opts.critic is None:
        raise ValueError("ERRL2 needs a critic optimizer")
    actor_params = policy.actor_parameters()
    opts.actor.zero_grad(set_to_none=True)
    opts.critic.zero_grad(set_to_none=True)
    J, critic_loss, out, value = errl2_objective(policy, batch, cfg, generator)
    (critic_loss - J).backward()
    _check_grads(actor_params + policy.critic_parameters(), batch, dump_dir)
    gnorm = _clip(actor_params, cfg.grad_clip_norm)
    _clip(policy.critic_parameters(), cfg.grad_clip_norm)
    opts.actor.step()
    opts.critic.step()
    opts.step_schedulers()
    assert_finite(policy)
    steps = out.n_steps.sum().clamp(min=1)
    return StepMetrics(-float(J.detach()), float(out.length.detach().mean()), float(out.entropy.detach().sum() / steps),
                       float(-value.mean()), gnorm, float(critic_loss.detach()))


@torch.no_grad()
def greedy_mean_length(policy: AttentionPolicy, batch: InstanceBatch, chunk: int = 1000) -> float:
    total = 0.0
    for i in range(0, batch.size[0], chunk):
        idx = torch.arange(i, min(i + chunk, batch.size[0]))
        total += float(run_decoder(policy, batch.index(idx), "greedy").length.sum())
    return total / batch.size[0]


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, policy: AttentionPolicy, opts: Optimizers | None, cfg: TrainConfig | None,
                    epoch: int, generator: torch.Generator | None, metrics: list[EpochMetrics] | None = None) -> None:
    tmp = f"{path}.tmp"
    torch.save({
        "version": CHECKPOINT_VERSION,
        "policy_config": policy.cfg.to_dict(),
        "train_config": None if cfg is None else asdict(cfg),
        "epoch": epoch,
        "model": policy.state_dict(),
        "optimizers": None if opts is None else opts.state_dict(),
        "generator": None if generator is None else generator.get_state(),
        "metrics": [asdict(m) for m in metrics or []],
    }, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    try:
        ck = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(ck, dict) or ck.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {ck.get('version') if isinstance(ck, dict) else None!r} "
                              f"!= {CHECKPOINT_VERSION}")
    return ck


def load_policy(path) -> AttentionPolicy:
    ck = load_checkpoint(path)
    policy = AttentionPolicy(PolicyConfig.from_dict(ck["policy_config"]))
    policy.load_state_dict(ck["model"])
    policy.eval()
    return policy


# --------------------------------------------------------------------------
# Training loop


def write_metrics_csv(path, rows: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for m in rows:
            w.writerow([m.epoch, repr(m.mean_val_length), repr(m.mean_entropy), repr(m.baseline_mean),
                        repr(m.grad_norm), f"{m.seconds:.3f}"])


def train(cfg: TrainConfig, out_dir: "str | os.PathLike", resume: bool = True,
          on_epoch=None) -> TrainReport:
    """Train for ``cfg.epochs`` epochs, checkpointing after each one.

    With ``resume`` an existing ``checkpoint.pt`` in ``out_dir`` whose
    configuration matches (ignoring ``epochs``) is continued; continuation is
    bitwise identical to an uninterrupted run on the same platform.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ck_path = out / "checkpoint.pt"
    policy = build_policy(cfg.policy_config(), seed=cfg.seed)
    opts = make_optimizers(policy, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    report = TrainReport(cfg, checkpoint_path=str(ck_path))
    start = 1
    if resume and ck_path.exists():
        ck = load_checkpoint(ck_path)
        saved = TrainConfig.from_dict(ck["train_config"])
        if saved.resume_key() != cfg.resume_key():
            raise CheckpointError(f"checkpoint in {out} was written with a different configuration")
        policy.load_state_dict(ck["model"])
        opts.load_state_dict(ck["optimizers"])
        gen.set_state(ck["generator"])
        report.epochs = [EpochMetrics(**m) for m in ck["metrics"]]
        start = ck["epoch"] + 1
        log.info("resuming %s at epoch %d", out, start)
    step_fn = errl1_step if cfg.trainer == "ERRL1" else errl2_step

    for epoch in range(start, cfg.epochs + 1):
        t0 = time.perf_counter()
        policy.train()
        step_metrics = []
        for step in range(cfg.steps_per_epoch):
            batch = train_batch(cfg, epoch, step)
            step_metrics.append(step_fn(policy, opts, batch, cfg, gen, dump_dir=str(out)))
        policy.eval()
        val = greedy_mean_length(policy, validation_batch(cfg, epoch))
        m = EpochMetrics(
            epoch,
            val,
            float(np.mean([s.mean_entropy for s in step_metrics])),
            float(np.mean([s.baseline_mean for s in step_metrics])),
            float(np.mean([s.grad_norm for s in step_metrics])),
            time.perf_counter() - t0,
        )
        report.epochs.append(m)
        save_checkpoint(ck_path, policy, opts, cfg, epoch, gen, report.epochs)
        write_metrics_csv(out / "metrics.csv", report.epochs)
        log.info("epoch %d val %.4f entropy %.4f grad %.3f (%.1fs)", epoch, val, m.mean_entropy, m.grad_norm, m.seconds)
        if on_epoch is not None:
            on_epoch(m)
    return report
