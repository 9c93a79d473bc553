"""Supervised baselines trained on oracle traces.

``oracle_canonical`` traces spell out the full canonical program (the CoT
teacher analog). ``answer_only`` traces collapse the thinking block to a
single SELECT of the cell holding the answer, or of the cell closest to it
when the answer is computed rather than read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .chartenv import ChartTask, DslOp, canonical_program, featurize
from .policy import (
    AdamState,
    PolicyParams,
    apply_update,
    backward_rows,
    build_batch,
    score_batch,
)
from .response import SYMBOLS, program_tokens

SOURCES = ("oracle_canonical", "answer_only")
_BY_SYMBOL = {s: i for i, s in enumerate(SYMBOLS)}


@dataclass(frozen=True)
class Trace:
    task_id: str
    tokens: tuple[int, ...]
    source: str


def answer_cell(task: ChartTask) -> tuple[int, int]:
    """Cell whose value is closest to the ground truth (first in row-major order on ties)."""
    best, best_err = (0, 0), float("inf")
    for s, row in enumerate(task.table.values):
        for c, x in enumerate(row):
            err = abs(x - task.ground_truth)
            if err < best_err:
                best, best_err = (s, c), err
    return best


def make_trace(task: ChartTask, mode: str) -> Trace:
    if mode == "oracle_canonical":
        program = canonical_program(task.query)
    elif mode == "answer_only":
        program = [DslOp("SELECT", answer_cell(task)), DslOp("EMIT")]
    else:
        raise ValueError(f"mode must be one of {SOURCES}, got {mode!r}")
    return Trace(task.task_id, tuple(int(t) for t in program_tokens(program)), mode)


def generate_traces(corpus: Sequence[ChartTask], mode: str) -> list[Trace]:
    return [make_trace(task, mode) for task in corpus]


def sft_loss_and_grads(params: PolicyParams, features: Sequence[np.ndarray], traces: Sequence[Trace],
                       masking: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-token cross-entropy over ``traces`` and its gradient."""
    batch = build_batch(features, [t.tokens for t in traces], masking)
    cache = score_batch(params, batch)
    n = len(cache.logp)
    if not np.all(np.isfinite(cache.logp)):
        raise ValueError("a trace token is structurally masked")
    loss = -float(np.sum(cache.logp)) / n
    grads = backward_rows(params, cache, np.full(n, -1.0 / n))
    return loss, grads


def sft_train(params: PolicyParams, traces: Sequence[Trace], epochs: int, lr: float, *,
              tasks: Sequence[ChartTask], batch_size: int = 16, seed: int = 0,
              masking: bool = True) -> tuple[PolicyParams, list[float]]:
    """Minibatch teacher-forced training; returns final params and per-epoch mean loss.

    ``tasks`` supplies the features for each trace (matched by task id).
    """
    if not traces:
        raise ValueError("traces must be nonempty")
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    by_id = {t.task_id: t for t in tasks}
    feats = [featurize(by_id[tr.task_id]) for tr in traces]
    rng = np.random.default_rng(seed)
    opt = AdamState.zeros(params)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(traces))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = sft_loss_and_grads(params, [feats[i] for i in idx], [traces[i] for i in idx], masking)
            params, opt = apply_update(params, grads, opt, lr)
            losses.append(loss)
        curve.append(float(np.mean(losses)))
    return params, curve


def write_traces(path: str | Path, traces: Sequence[Trace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in traces:
            row = {"task_id": t.task_id, "tokens": [SYMBOLS[x] for x in t.tokens], "source": t.source}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_traces(path: str | Path) -> list[Trace]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                if row["source"] not in SOURCES:
                    raise ValueError(f"unknown trace source {row['source']!r}")
                out.append(Trace(row["task_id"], tuple(int(_BY_SYMBOL[s]) for s in row["tokens"]), row["source"]))
    return out
