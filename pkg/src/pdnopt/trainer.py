"""REINFORCE with a greedy rollout baseline.

Each step samples a fresh batch of problem instances, draws one stochastic
rollout per instance from the training policy and one greedy rollout from a
frozen baseline copy, and ascends the advantage-weighted log-likelihood.
The baseline is replaced at epoch end when a one-sided paired t-test on
fresh validation instances says the training policy's greedy cost is lower.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import policy_net
from .environment import DatasetRecord
from .policy_net import PolicyParams


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 20
    steps_per_epoch: int = 1000
    batch_size: int = 100
    validation_size: int = 100
    learning_rate: float = 1e-4
    lr_decay: float = 0.95
    ttest_threshold: float = 0.05
    n: int = 100
    m: int = 20
    seed: int = 0

    @classmethod
    def tiny(cls, n: int = 16, m: int = 4, seed: int = 0) -> "TrainerConfig":
        return cls(epochs=10, steps_per_epoch=10, batch_size=24,
                   validation_size=24, learning_rate=2e-3, n=n, m=m, seed=seed)


class Task(Protocol):
    """Problem source: fresh instances plus the shared reward estimator."""

    def sample_records(self, rng, count: int, n: int) -> list[DatasetRecord]: ...

    def reward(self, record: DatasetRecord, assignment) -> float: ...


class AdamState:
    """Per-parameter first/second moments, standard bias correction."""

    def __init__(self, params: PolicyParams,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def update(self, params: PolicyParams, lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, t in params.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            t.data -= lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)


def paired_t_test(costs_candidate, costs_baseline) -> float:
    """One-sided p-value that the candidate's cost is lower (paired)."""
    a = np.asarray(costs_candidate, dtype=np.float64)
    b = np.asarray(costs_baseline, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    d = a - b
    if np.all(d == 0.0):
        return 1.0
    sd = d.std(ddof=1)
    if sd == 0.0:
        # Nonzero constant difference: evidence is one-directional and
        # unbounded; report the smallest positive double on improvement.
        return float(np.nextafter(0.0, 1.0)) if d[0] < 0.0 else 1.0
    t = d.mean() / (sd / np.sqrt(d.size))
    return float(stats.t.cdf(t, df=d.size - 1))


@dataclass
class StepStats:
    mean_reward: float
    mean_advantage: float
    grad_norm: float


def reinforce_step(
    records: list[DatasetRecord],
    params: PolicyParams,
    baseline: PolicyParams,
    adam: AdamState,
    task: Task,
    m: int,
    lr: float,
    rng,
) -> StepStats:
    """One policy-gradient step over a batch of records.

    Cost is the negative reward; the loss is the batch mean of
    (cost(sample) - cost(greedy baseline)) * log-prob(sample).
    """
    if not records:
        raise ValueError("batch must be nonempty")
    rng = np.random.default_rng(rng)
    terms = []
    rewards = []
    advantages = []
    for record in records:
        sampled = policy_net.rollout(params, record.state.features, m,
                                     mode="sampling", rng=rng)
        with ad.no_grad():
            greedy = policy_net.rollout(baseline, record.state.features, m,
                                        mode="greedy")
        r = task.reward(record, sampled.positions)
        r_bl = task.reward(record, greedy.positions)
        advantage = (-r) - (-r_bl)
        terms.append(sampled.log_prob * advantage)
        rewards.append(r)
        advantages.append(advantage)
    params.zero_grads()
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    loss = total * (1.0 / len(terms))
    ad.backward(loss)
    sq = 0.0
    for _, t in params.items():
        if t.grad is not None:
            sq += float(np.sum(t.grad * t.grad))
    adam.update(params, lr)
    return StepStats(
        mean_reward=float(np.mean(rewards)),
        mean_advantage=float(np.mean(advantages)),
        grad_norm=float(np.sqrt(sq)),
    )


def greedy_validation_rewards(
    params: PolicyParams,
    records: list[DatasetRecord],
    task: Task,
    m: int,
) -> np.ndarray:
    out = np.empty(len(records))
    with ad.no_grad():
        for i, record in enumerate(records):
            roll = policy_net.rollout(params, record.state.features, m, mode="greedy")
            out[i] = task.reward(record, roll.positions)
    return out


@dataclass
class TrainLogRow:
    epoch: int
    step: int
    mean_reward: float
    validation_reward: float | None
    lr: float
    baseline_swapped: bool


LOG_COLUMNS = ("epoch", "step", "mean_reward", "validation_reward", "lr",
               "baseline_swapped")


def write_log(rows: list[TrainLogRow], path: str | Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([
                r.epoch, r.step, repr(r.mean_reward),
                "" if r.validation_reward is None else repr(r.validation_reward),
                repr(r.lr), int(r.baseline_swapped),
            ])


@dataclass
class TrainResult:
    params: PolicyParams
    log: list[TrainLogRow] = field(default_factory=list)


def train(
    cfg: TrainerConfig,
    params: PolicyParams,
    task: Task,
    checkpoint_dir: str | Path | None = None,
    on_epoch: Callable[[int, PolicyParams], None] | None = None,
) -> TrainResult:
    """Run the full training loop; deterministic for a fixed config seed.

    Batches use per-(epoch, step) seeded streams and validation uses
    per-epoch seeded streams, so two sequential runs produce identical logs
    and checkpoints.
    """
    root_seq = np.random.SeedSequence(cfg.seed)
    baseline = params.copy()
    adam = AdamState(params)
    lr = cfg.learning_rate
    log: list[TrainLogRow] = []
    step_no = 0

    # Row 0: validation of the untrained policy, the training-curve anchor.
    val_records = task.sample_records(
        np.random.default_rng(root_seq.spawn(1)[0]), cfg.validation_size, cfg.n)
    val0 = greedy_validation_rewards(params, val_records, task, cfg.m)
    log.append(TrainLogRow(0, 0, float("nan"), float(val0.mean()), lr, False))

    for epoch in range(1, cfg.epochs + 1):
        epoch_seq = np.random.SeedSequence((cfg.seed, epoch))
        for step in range(1, cfg.steps_per_epoch + 1):
            step_no += 1
            batch_rng = np.random.default_rng((cfg.seed, epoch, step, 0))
            roll_rng = np.random.default_rng((cfg.seed, epoch, step, 1))
            batch = task.sample_records(batch_rng, cfg.batch_size, cfg.n)
            stats_ = reinforce_step(batch, params, baseline, adam, task,
                                    cfg.m, lr, roll_rng)
            log.append(TrainLogRow(epoch, step_no, stats_.mean_reward,
                                   None, lr, False))

        val_rng = np.random.default_rng(epoch_seq.spawn(1)[0])
        val_records = task.sample_records(val_rng, cfg.validation_size, cfg.n)
        cand = greedy_validation_rewards(params, val_records, task, cfg.m)
        base = greedy_validation_rewards(baseline, val_records, task, cfg.m)
        p_value = paired_t_test(-cand, -base)
        swapped = p_value < cfg.ttest_threshold
        if swapped:
            baseline = params.copy()
        log[-1] = replace(log[-1], validation_reward=float(cand.mean()),
                          baseline_swapped=swapped)
        lr *= cfg.lr_decay
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"policy_epoch{epoch:03d}.bin"
            policy_net.save_policy(path, params)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return TrainResult(params=params, log=log)
