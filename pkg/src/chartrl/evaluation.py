"""Held-out evaluation, significance tests and robustness sweeps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .chartenv import ChartTask, PerturbationKind, featurize, perturb_task
from .errors import UnsupportedPerturbation
from .policy import PolicyParams, sample_batch
from .response import Response
from .reward import RewardConfig, score_response

TEST_VARIANT = "pooled two-sided z-test"


@dataclass
class EvalReport:
    n: int
    accuracy: float
    by_category: dict[str, tuple[int, float]] = field(default_factory=dict)
    correct: int = 0
    baseline_accuracy: float | None = None
    relative_delta: float | None = None
    p_value: float | None = None
    test: str = TEST_VARIANT

    def to_dict(self) -> dict:
        d = asdict(self)
        d["by_category"] = {k: {"n": n, "accuracy": a} for k, (n, a) in self.by_category.items()}
        return d


def evaluate(params: PolicyParams, tasks: Sequence[ChartTask], config: RewardConfig = RewardConfig(),
             masking: bool = True, sample_seed: int | None = None) -> EvalReport:
    """Accuracy of greedy decoding (or seeded sampling when ``sample_seed`` is set).

    ``by_category`` is keyed by query kind, and additionally by perturbation
    kind for perturbed tasks.
    """
    if not tasks:
        raise ValueError("tasks must be nonempty")
    rng = None if sample_seed is None else np.random.default_rng(sample_seed)
    rollouts = sample_batch(params, [featurize(t) for t in tasks], rng, masking=masking,
                            greedy=sample_seed is None)
    counts: dict[str, list[int]] = {}
    correct = 0
    for task, ro in zip(tasks, rollouts):
        ok = score_response(task, Response.from_tokens(ro.tokens), config).accuracy
        correct += ok
        keys = [task.query.kind]
        if task.perturbation is not None:
            keys.append(f"perturbation:{task.perturbation.value}")
        for key in keys:
            c = counts.setdefault(key, [0, 0])
            c[0] += 1
            c[1] += ok
    by_category = {k: (n, hits / n) for k, (n, hits) in sorted(counts.items())}
    return EvalReport(n=len(tasks), accuracy=correct / len(tasks), by_category=by_category, correct=correct)


def relative_delta(baseline: float, treatment: float) -> float:
    if baseline <= 0:
        raise ValueError(f"relative delta is undefined for baseline {baseline}")
    return (treatment - baseline) / baseline


def normal_sf(z: float) -> float:
    """Upper tail of the standard normal via ``erfc`` (no cancellation for large z)."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def two_proportion_z(correct_a: int, n_a: int, correct_b: int, n_b: int) -> float:
    if n_a < 1 or n_b < 1:
        raise ValueError("both groups need at least one trial")
    if not (0 <= correct_a <= n_a and 0 <= correct_b <= n_b):
        raise ValueError("correct counts must lie in [0, n]")
    pa, pb = correct_a / n_a, correct_b / n_b
    pooled = (correct_a + correct_b) / (n_a + n_b)
    var = pooled * (1.0 - pooled) * (1.0 / n_a + 1.0 / n_b)
    if var == 0.0:
        return 0.0
    return (pa - pb) / math.sqrt(var)


def two_proportion_test(correct_a: int, n_a: int, correct_b: int, n_b: int) -> float:
    """Two-sided p-value of the pooled z-test; identical pooled rates give p = 1."""
    z = two_proportion_z(correct_a, n_a, correct_b, n_b)
    return min(1.0, 2.0 * normal_sf(abs(z)))


def compare(report: EvalReport, baseline: EvalReport) -> EvalReport:
    """Copy of ``report`` with baseline accuracy, relative delta and p-value filled in."""
    delta = relative_delta(baseline.accuracy, report.accuracy) if baseline.accuracy > 0 else None
    p = two_proportion_test(report.correct, report.n, baseline.correct, baseline.n)
    return EvalReport(report.n, report.accuracy, dict(report.by_category), report.correct,
                      baseline.accuracy, delta, p)


def robustness_sweep(params: PolicyParams, base_tasks: Sequence[ChartTask],
                     kinds: Sequence[PerturbationKind | str], seed: int,
                     config: RewardConfig = RewardConfig(), masking: bool = True) -> dict[str, EvalReport]:
    """Evaluate on each perturbed copy of ``base_tasks``; key ``"normal"`` is the unperturbed run.

    Tasks a perturbation cannot apply to are skipped, so a report's ``n`` can
    be below the base corpus size.
    """
    if any(t.perturbation is not None for t in base_tasks):
        raise ValueError("robustness_sweep expects unperturbed base tasks")
    out = {"normal": evaluate(params, base_tasks, config, masking)}
    for kind in kinds:
        kind = PerturbationKind(kind)
        variants = []
        for i, task in enumerate(base_tasks):
            try:
                variants.append(perturb_task(task, kind, seed * 2**20 + i))
            except UnsupportedPerturbation:
                continue
        if variants:
            out[kind.value] = evaluate(params, variants, config, masking)
    return out


def write_report_json(path: str | Path, report: EvalReport, extra: dict | None = None) -> None:
    body = report.to_dict()
    if extra:
        body.update(extra)
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report_csv(path: str | Path, report: EvalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "n", "accuracy"])
        w.writerow(["all", report.n, repr(report.accuracy)])
        for key, (n, acc) in report.by_category.items():
            w.writerow([key, n, repr(acc)])


def write_sweep_csv(path: str | Path, sweep: dict[str, EvalReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["perturbation", "n", "accuracy"])
        for key, rep in sweep.items():
            w.writerow([key, rep.n, repr(rep.accuracy)])
