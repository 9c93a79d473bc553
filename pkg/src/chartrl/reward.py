"""Verifiable rewards: relative-error accuracy and binary template compliance."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

from .chartenv import ChartTask, Malformed, execute_program
from .errors import ConfigError, ParseError
from .response import Response, extract_program, parse, validate_grammar


@dataclass(frozen=True)
class RewardConfig:
    tau: float = 0.05
    zero_guard: float = 1e-9
    weight_accuracy: float = 1.0
    weight_format: float = 1.0

    def validate(self) -> None:
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau must be in (0, 1), got {self.tau}")
        if self.zero_guard < 0:
            raise ConfigError("zero_guard must be non-negative")
        if self.weight_accuracy < 0 or self.weight_format < 0:
            raise ConfigError("reward weights must be non-negative")
        if self.weight_accuracy == 0 and self.weight_format == 0:
            raise ConfigError("at least one reward weight must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy: int
    format: int
    total: float


def accuracy_reward(prediction: float | Malformed | None, ground_truth: float,
                    config: RewardConfig = RewardConfig()) -> int:
    """1 iff the relative error of ``prediction`` is within ``tau``.

    Below ``zero_guard`` in magnitude the ground truth is compared with an
    absolute tolerance of ``tau`` instead.
    """
    if prediction is None or isinstance(prediction, Malformed):
        return 0
    try:
        vp = float(prediction)
    except (TypeError, ValueError):
        return 0
    if not math.isfinite(vp):
        return 0
    err = abs(vp - ground_truth)
    if abs(ground_truth) < config.zero_guard:
        return int(err <= config.tau)
    return int(err / abs(ground_truth) <= config.tau)


def format_reward(text: str) -> int:
    try:
        tokens = parse(text)
    except ParseError:
        return 0
    return int(validate_grammar(tokens))


def _combine(accuracy: int, fmt: int, config: RewardConfig) -> RewardBreakdown:
    return RewardBreakdown(accuracy, fmt, config.weight_accuracy * accuracy + config.weight_format * fmt)


def score_response(task: ChartTask, response: Response, config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    fmt = format_reward(response.text)
    prediction = execute_program(task.table, extract_program(response.tokens))
    return _combine(accuracy_reward(prediction, task.ground_truth, config), fmt, config)


def score_text(task: ChartTask, text: str, config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Score raw response text (unparseable text earns nothing)."""
    try:
        tokens = parse(text)
    except (ParseError, TypeError):
        return _combine(0, 0, config)
    return score_response(task, Response.from_tokens(tokens), config)


def grade_jsonl(tasks: Mapping[str, ChartTask], in_path: str | Path, out_path: str | Path,
                config: RewardConfig = RewardConfig()) -> int:
    """Grade ``{task_id, response_text}`` lines; writes ``{task_id, accuracy, format, total}``."""
    n = 0
    with open(in_path) as src, open(out_path, "w") as dst:
        for line in src:
            if not line.strip():
                continue
            row = json.loads(line)
            task = tasks[row["task_id"]]
            result = score_text(task, row["response_text"], config)
            dst.write(json.dumps({"task_id": row["task_id"], **asdict(result)}) + "\n")
            n += 1
    return n
