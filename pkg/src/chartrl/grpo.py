"""Group relative policy optimization over the chart task environment."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .chartenv import ChartTask, featurize, task_to_dict
from .errors import ConfigError, TrainingError
from .policy import (
    AdamState,
    PolicyParams,
    Rollout,
    apply_update,
    backward_rows,
    build_batch,
    load_checkpoint,
    sample_batch,
    save_checkpoint,
    score_batch,
)
from .response import Response
from .reward import RewardConfig, score_response

DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    lr: float = 1e-3
    steps: int = 3000
    tasks_per_step: int = 4
    seed: int = 0
    reward: RewardConfig = field(default_factory=RewardConfig)
    structural_masking: bool = True
    inner_epochs: int = 1

    def validate(self) -> None:
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2 (std of one reward is undefined), got {self.group_size}")
        if not 0 < self.clip_eps < 1:
            raise ConfigError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.kl_beta < 0:
            raise ConfigError(f"kl_beta must be >= 0, got {self.kl_beta}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.steps < 0 or self.tasks_per_step < 1 or self.inner_epochs < 1:
            raise ConfigError("steps >= 0, tasks_per_step >= 1 and inner_epochs >= 1 are required")
        self.reward.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["reward"] = RewardConfig(**d.get("reward", {}))
        return cls(**d)


@dataclass
class GroupSample:
    task_id: str
    rollouts: list[Rollout]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logprobs: list[np.ndarray]
    ref_logprobs: list[np.ndarray]
    accuracy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    format: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_accuracy_reward: float
    mean_format_reward: float
    mean_total_reward: float
    mean_kl: float
    loss: float
    clip_fraction: float
    wall_time: float


METRIC_COLUMNS = (
    "step", "mean_accuracy_reward", "mean_format_reward", "mean_total_reward",
    "mean_kl", "loss", "clip_fraction",
)


# --------------------------------------------------------------------------
# Objective pieces
# --------------------------------------------------------------------------

def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Group-normalized rewards using the population standard deviation.

    A group whose standard deviation is below 1e-8 gets all-zero advantages.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError("advantages need a group of at least 2 rewards")
    std = float(np.std(r))
    if std < DEGENERATE_STD:
        return np.zeros_like(r)
    return (r - np.mean(r)) / std


def kl_estimate(cur_logprobs: np.ndarray, ref_logprobs: np.ndarray) -> float:
    """Mean over tokens of exp(ref - cur) - (ref - cur) - 1 (never negative)."""
    cur = np.asarray(cur_logprobs, dtype=float)
    ref = np.asarray(ref_logprobs, dtype=float)
    if cur.shape != ref.shape:
        raise ValueError("log-prob vectors must have equal length")
    if cur.size == 0:
        return 0.0
    d = ref - cur
    return float(np.mean(np.expm1(d) - d))


def exact_kl(params: PolicyParams, ref_params: PolicyParams, features: np.ndarray,
             tokens: Sequence[int], masking: bool = True) -> float:
    """Mean over the steps of ``tokens`` of the full categorical KL(cur || ref).

    Cross-check for ``kl_estimate``, whose expectation under sampling from
    ``params`` equals this quantity.
    """
    if not tokens:
        return 0.0
    batch = build_batch([features], [tokens], masking)
    cur = score_batch(params, batch)
    ref = score_batch(ref_params, batch)
    with np.errstate(divide="ignore", invalid="ignore"):
        lc, lr = np.log(cur.probs), np.log(ref.probs)
        terms = np.where(cur.probs > 0, cur.probs * (lc - lr), 0.0)
    return float(np.mean(np.sum(terms, axis=1)))


def clipped_term(ratio: float, advantage: float, clip_eps: float) -> float:
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    clipped = min(max(ratio, 1.0 - clip_eps), 1.0 + clip_eps)
    return min(ratio * advantage, clipped * advantage)


@dataclass
class LossParts:
    loss: float
    coefficients: list[np.ndarray]  # d loss / d cur_logprob, per response
    clip_fraction: float
    mean_kl: float


def grpo_loss(group: GroupSample, cur_logprobs: Sequence[np.ndarray], config: TrainConfig) -> LossParts:
    """Negated clipped-surrogate objective with KL penalty, and its token gradients.

    Per-token ratios exp(cur - old) share their response's advantage; each
    response averages over its tokens and the group averages over responses.
    """
    N = len(group.rollouts)
    eps, beta = config.clip_eps, config.kl_beta
    objective = 0.0
    kls = []
    coefs = []
    clipped_tokens = 0
    total_tokens = 0
    for i in range(N):
        cur = np.asarray(cur_logprobs[i], dtype=float)
        old = np.asarray(group.old_logprobs[i], dtype=float)
        ref = np.asarray(group.ref_logprobs[i], dtype=float)
        T = len(cur)
        if T == 0:
            coefs.append(cur.copy())
            kls.append(0.0)
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            ratio = np.exp(cur - old)
        if not np.all(np.isfinite(ratio)):
            raise TrainingError(f"non-finite importance ratio in {group.task_id} response {i}: {group.rollouts[i].tokens}")
        A = float(group.advantages[i])
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
        unclipped_obj = ratio * A
        clipped_obj = clipped * A
        use_clip = clipped_obj < unclipped_obj
        surrogate = np.where(use_clip, clipped_obj, unclipped_obj)
        d = ref - cur
        kl_tok = np.expm1(d) - d
        kl = float(np.mean(kl_tok))
        objective += float(np.mean(surrogate)) - beta * kl
        kls.append(kl)
        dsur = np.where(use_clip, 0.0, unclipped_obj)
        dkl = 1.0 - np.exp(d)  # d/dcur of exp(ref-cur) - (ref-cur) - 1
        coefs.append(-(dsur - beta * dkl) / (T * N))
        clipped_tokens += int(np.sum(use_clip))
        total_tokens += T
    return LossParts(
        loss=-objective / N,
        coefficients=coefs,
        clip_fraction=clipped_tokens / total_tokens if total_tokens else 0.0,
        mean_kl=float(np.mean(kls)),
    )


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    params: PolicyParams
    ref_params: PolicyParams
    optimizer: AdamState
    rng: np.random.Generator
    step: int = 0
    metrics: list[StepMetrics] = field(default_factory=list)

    @classmethod
    def fresh(cls, params: PolicyParams, config: TrainConfig) -> "TrainState":
        return cls(params.copy(), params.copy(), AdamState.zeros(params),
                   np.random.default_rng(config.seed))


def _score_group(task: ChartTask, rollouts: list[Rollout], config: TrainConfig):
    acc, fmt, total = [], [], []
    for ro in rollouts:
        b = score_response(task, Response.from_tokens(ro.tokens), config.reward)
        acc.append(b.accuracy)
        fmt.append(b.format)
        total.append(b.total)
    return np.array(acc, float), np.array(fmt, float), np.array(total, float)


def collect_groups(state: TrainState, tasks: Sequence[ChartTask], config: TrainConfig) -> list[GroupSample]:
    """Sample, score and normalize one group per task with the current params."""
    N = config.group_size
    feats = [featurize(t) for t in tasks]
    rollouts = sample_batch(state.params, [f for f in feats for _ in range(N)], state.rng,
                            masking=config.structural_masking)
    batch = build_batch([r.features for r in rollouts], [r.tokens for r in rollouts], config.structural_masking)
    ref_logp = batch.split(score_batch(state.ref_params, batch).logp)
    groups = []
    for j, task in enumerate(tasks):
        ros = rollouts[j * N:(j + 1) * N]
        acc, fmt, total = _score_group(task, ros, config)
        groups.append(GroupSample(
            task_id=task.task_id,
            rollouts=ros,
            rewards=total,
            advantages=compute_advantages(total),
            old_logprobs=[r.per_step_logprobs for r in ros],
            ref_logprobs=ref_logp[j * N:(j + 1) * N],
            accuracy=acc,
            format=fmt,
        ))
    return groups


def train_step(state: TrainState, corpus: Sequence[ChartTask], config: TrainConfig) -> StepMetrics:
    """One rollout batch followed by ``inner_epochs`` updates; mutates ``state``."""
    t0 = time.perf_counter()
    picks = state.rng.integers(len(corpus), size=config.tasks_per_step)
    tasks = [corpus[int(i)] for i in picks]
    groups = collect_groups(state, tasks, config)
    rollouts = [r for g in groups for r in g.rollouts]
    batch = build_batch([r.features for r in rollouts], [r.tokens for r in rollouts], config.structural_masking)
    N = config.group_size
    n_tasks = len(groups)
    first = None
    for _ in range(config.inner_epochs):
        cache = score_batch(state.params, batch)
        cur = batch.split(cache.logp)
        parts = [grpo_loss(g, cur[j * N:(j + 1) * N], config) for j, g in enumerate(groups)]
        coef = np.concatenate([c for p in parts for c in p.coefficients]) / n_tasks
        if first is None:
            first = parts
        grads = backward_rows(state.params, cache, coef)
        state.params, state.optimizer = apply_update(state.params, grads, state.optimizer, config.lr)
    state.step += 1
    m = StepMetrics(
        step=state.step - 1,
        mean_accuracy_reward=float(np.mean([g.accuracy for g in groups])),
        mean_format_reward=float(np.mean([g.format for g in groups])),
        mean_total_reward=float(np.mean([g.rewards for g in groups])),
        mean_kl=float(np.mean([p.mean_kl for p in first])),
        loss=float(np.mean([p.loss for p in first])),
        clip_fraction=float(np.mean([p.clip_fraction for p in first])),
        wall_time=time.perf_counter() - t0,
    )
    state.metrics.append(m)
    return m


def run_training(config: TrainConfig, corpus: Sequence[ChartTask], params: PolicyParams | None = None, *,
                 state: TrainState | None = None, until: int | None = None,
                 callback: Callable[[TrainState, StepMetrics], None] | None = None) -> TrainState:
    """Run GRPO up to ``config.steps`` (or step ``until``) and return the full state.

    Pass ``state`` to resume; the reference policy stays fixed at the
    params the run started from.
    """
    config.validate()
    if not corpus:
        raise ConfigError("training corpus is empty")
    if state is None:
        if params is None:
            raise ValueError("either params or state is required")
        state = TrainState.fresh(params, config)
    stop = config.steps if until is None else min(until, config.steps)
    while state.step < stop:
        m = train_step(state, corpus, config)
        if callback is not None:
            callback(state, m)
    return state


def train(config: TrainConfig, corpus: Sequence[ChartTask],
          params: PolicyParams) -> tuple[PolicyParams, list[StepMetrics]]:
    state = run_training(config, corpus, params)
    return state.params, state.metrics


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def save_state(path: str | Path, state: TrainState, config: TrainConfig, manifest: dict | None = None) -> None:
    ref_path = Path(str(path) + ".ref.json")
    save_checkpoint(ref_path, state.ref_params)
    extra = {
        "kind": "grpo",
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "train_config": config.to_dict(),
        "metrics": [asdict(m) for m in state.metrics],
        "ref_checkpoint": ref_path.name,
        "manifest": manifest or {},
    }
    save_checkpoint(path, state.params, state.optimizer, extra)


def load_state(path: str | Path) -> tuple[TrainState, TrainConfig]:
    params, optimizer, extra = load_checkpoint(path)
    if extra.get("kind") != "grpo":
        raise ValueError(f"{path} is not a resumable GRPO checkpoint")
    ref_params, _, _ = load_checkpoint(Path(path).parent / extra["ref_checkpoint"])
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["rng"]
    metrics = [StepMetrics(**m) for m in extra["metrics"]]
    config = TrainConfig.from_dict(extra["train_config"])
    return TrainState(params, ref_params, optimizer, rng, extra["step"], metrics), config


def _fmt(x) -> str:
    return repr(x) if isinstance(x, float) else str(x)


def write_metrics_csv(path: str | Path, metrics: Sequence[StepMetrics]) -> None:
    """Deterministic metrics table; wall-clock times go to a ``.timing.csv`` sidecar."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow([_fmt(getattr(m, c)) for c in METRIC_COLUMNS])
    with open(str(path).removesuffix(".csv") + ".timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "wall_time_ms"))
        for m in metrics:
            w.writerow((m.step, f"{m.wall_time * 1000:.3f}"))


def read_metrics_csv(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def corpus_checksum(corpus: Sequence[ChartTask]) -> str:
    h = hashlib.sha256()
    for t in corpus:
        h.update(json.dumps(task_to_dict(t), sort_keys=True).encode())
        h.update(b"\n")
    return h.hexdigest()


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing rolling mean (shorter windows at the start)."""
    v = np.asarray(values, dtype=float)
    if window <= 1:
        return v.copy()
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
