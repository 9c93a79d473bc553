"""Synthetic chart tasks: generation, ground truth, program execution, perturbation.

Charts are plain data tables (``num_series`` rows by ``num_categories``
columns). A task pairs one table with one query whose answer is a single
real number. Easy tasks read one cell; hard tasks compose several steps.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, UnsupportedPerturbation

MAX_SERIES = 4
MAX_CATEGORIES = 8
MAX_RANK = 4
MAX_STACK = 4

CHART_KINDS = ("bar", "grouped_bar", "line", "scatter")

EASY_KINDS = ("extract_cell",)
HARD_KINDS = (
    "argmax_value",
    "argmin_value",
    "rank_k_then_read",
    "diff_two_cells",
    "ratio_two_cells",
    "sum_series",
    "mean_series",
    "cross_series_compare",
)
QUERY_KINDS = EASY_KINDS + HARD_KINDS

# Positional argument layout per query kind.
QUERY_ARGS = {
    "extract_cell": ("series", "category"),
    "argmax_value": ("series",),
    "argmin_value": ("series",),
    "sum_series": ("series",),
    "mean_series": ("series",),
    "rank_k_then_read": ("rank",),
    "diff_two_cells": ("series", "category", "category2"),
    "ratio_two_cells": ("series", "category", "category2"),
    "cross_series_compare": ("series", "series2", "category"),
}

_SERIES_NAMES = (
    "Revenue", "Cost", "Accuracy", "Time", "Sodium", "Protein", "Users",
    "Latency", "Sales", "Margin", "Energy", "Score",
)
_CATEGORY_NAMES = (
    "Alpha", "Bravo", "Charlie", "Delta", "Echo", "Foxtrot", "Golf", "Hotel",
    "India", "Juliet", "Kilo", "Lima", "Mike", "November",
)


class PerturbationKind(str, enum.Enum):
    SERIES_REORDER = "series_reorder"
    CATEGORY_REORDER = "category_reorder"
    VALUE_RESCALE = "value_rescale"
    LABEL_RENAME = "label_rename"
    AXIS_TRANSPOSE = "axis_transpose"
    DISTRACTOR_SERIES = "distractor_series"


# Powers of two keep rescaled arithmetic exact in binary floating point.
RESCALE_FACTORS = (0.25, 0.5, 2.0, 4.0)


@dataclass(frozen=True)
class EnvConfig:
    min_series: int = 1
    max_series: int = MAX_SERIES
    min_categories: int = 2
    max_categories: int = MAX_CATEGORIES
    value_max: float = 1000.0

    def validate(self) -> None:
        if not 1 <= self.min_series <= self.max_series <= MAX_SERIES:
            raise ConfigError(
                f"series bounds must satisfy 1 <= min <= max <= {MAX_SERIES}, "
                f"got [{self.min_series}, {self.max_series}]"
            )
        if not 2 <= self.min_categories <= self.max_categories <= MAX_CATEGORIES:
            raise ConfigError(
                f"category bounds must satisfy 2 <= min <= max <= {MAX_CATEGORIES}, "
                f"got [{self.min_categories}, {self.max_categories}]"
            )
        if not 0 < self.value_max <= 1000.0:
            raise ConfigError(f"value_max must be in (0, 1000], got {self.value_max}")


@dataclass(frozen=True)
class ChartTable:
    chart_kind: str
    series_labels: tuple[str, ...]
    category_labels: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]

    @property
    def num_series(self) -> int:
        return len(self.values)

    @property
    def num_categories(self) -> int:
        return len(self.values[0])

    def validate(self) -> None:
        if self.chart_kind not in CHART_KINDS:
            raise ValueError(f"unknown chart kind {self.chart_kind!r}")
        if not 1 <= self.num_series <= MAX_SERIES:
            raise ValueError(f"num_series {self.num_series} outside [1, {MAX_SERIES}]")
        if not 2 <= self.num_categories <= MAX_CATEGORIES:
            raise ValueError(f"num_categories {self.num_categories} outside [2, {MAX_CATEGORIES}]")
        if any(len(row) != self.num_categories for row in self.values):
            raise ValueError("values array is not rectangular")
        if not all(math.isfinite(v) for row in self.values for v in row):
            raise ValueError("values must be finite")
        if len(self.series_labels) != self.num_series or len(set(self.series_labels)) != self.num_series:
            raise ValueError("series labels must be unique, one per series")
        if len(self.category_labels) != self.num_categories or len(set(self.category_labels)) != self.num_categories:
            raise ValueError("category labels must be unique, one per category")


@dataclass(frozen=True)
class Query:
    kind: str
    args: tuple[int, ...]
    text: str = ""

    @property
    def difficulty(self) -> str:
        return "easy" if self.kind in EASY_KINDS else "hard"


@dataclass(frozen=True)
class ChartTask:
    task_id: str
    table: ChartTable
    query: Query
    ground_truth: float
    difficulty: str
    perturbation: PerturbationKind | None = None


class DslOp(NamedTuple):
    """One executor instruction, e.g. ``DslOp("SELECT", (0, 1))``."""

    code: str
    args: tuple[int, ...] = ()


@dataclass(frozen=True)
class Malformed:
    """Result of a program that could not be evaluated."""

    reason: str = ""


MALFORMED = Malformed("malformed")


# --------------------------------------------------------------------------
# Ground truth
# --------------------------------------------------------------------------

def _check_args(table: ChartTable, query: Query) -> None:
    names = QUERY_ARGS.get(query.kind)
    if names is None:
        raise ValueError(f"unknown query kind {query.kind!r}")
    if len(query.args) != len(names):
        raise ValueError(f"{query.kind} takes {len(names)} args, got {len(query.args)}")
    for name, value in zip(names, query.args):
        if name in ("series", "series2"):
            ok = 0 <= value < table.num_series
        elif name in ("category", "category2"):
            ok = 0 <= value < table.num_categories
        else:
            ok = table.num_series >= 2 and 1 <= value <= min(MAX_RANK, table.num_categories)
        if not ok:
            raise ValueError(f"{query.kind} arg {name}={value} invalid for {table.num_series}x{table.num_categories} table")


def oracle_answer(table: ChartTable, query: Query) -> float:
    """Reference answer computed directly from the table."""
    _check_args(table, query)
    v = table.values
    a = query.args
    kind = query.kind
    if kind == "extract_cell":
        return v[a[0]][a[1]]
    if kind == "argmax_value":
        return max(v[a[0]])
    if kind == "argmin_value":
        return min(v[a[0]])
    if kind == "sum_series":
        return math.fsum(v[a[0]])
    if kind == "mean_series":
        return math.fsum(v[a[0]]) / len(v[a[0]])
    if kind == "rank_k_then_read":
        row = v[0]
        order = sorted(range(len(row)), key=lambda c: (-row[c], c))
        return v[1][order[a[0] - 1]]
    if kind == "diff_two_cells":
        return v[a[0]][a[1]] - v[a[0]][a[2]]
    if kind == "ratio_two_cells":
        return v[a[0]][a[1]] / v[a[0]][a[2]]
    if kind == "cross_series_compare":
        return v[a[0]][a[2]] - v[a[1]][a[2]]
    raise AssertionError(kind)


def canonical_program(query: Query) -> list[DslOp]:
    """Shortest program computing ``query`` (the SFT teacher trace)."""
    a = query.args
    kind = query.kind
    if kind == "extract_cell":
        ops = [DslOp("SELECT", (a[0], a[1]))]
    elif kind in ("argmax_value", "argmin_value", "sum_series", "mean_series"):
        code = {
            "argmax_value": "ARGMAX_ROW",
            "argmin_value": "ARGMIN_ROW",
            "sum_series": "SUM_ROW",
            "mean_series": "MEAN_ROW",
        }[kind]
        ops = [DslOp("SELECT", (a[0], 0)), DslOp(code)]
    elif kind == "rank_k_then_read":
        ops = [DslOp("RANK_K", (a[0],)), DslOp("READ_PAIRED")]
    elif kind in ("diff_two_cells", "ratio_two_cells"):
        code = "DIFF" if kind == "diff_two_cells" else "RATIO"
        ops = [DslOp("SELECT", (a[0], a[1])), DslOp("SELECT", (a[0], a[2])), DslOp(code)]
    elif kind == "cross_series_compare":
        ops = [DslOp("SELECT", (a[0], a[2])), DslOp("SELECT", (a[1], a[2])), DslOp("DIFF")]
    else:
        raise ValueError(f"unknown query kind {kind!r}")
    return ops + [DslOp("EMIT")]


# --------------------------------------------------------------------------
# Executor
# --------------------------------------------------------------------------

def _cell_value(table: ChartTable, item: tuple) -> float:
    if item[0] == "cell":
        return table.values[item[1]][item[2]]
    return item[1]


def execute_program(table: ChartTable, program: Sequence[DslOp] | Malformed) -> float | Malformed:
    """Run ``program`` on a stack machine; never raises.

    Stack items are cell references ``("cell", s, c)`` or scalars
    ``("scalar", x)``. ``EMIT`` must be the final instruction and returns the
    value of the top item; other items left on the stack are ignored.
    """
    if isinstance(program, Malformed):
        return program
    stack: list[tuple] = []
    ns, nc = table.num_series, table.num_categories
    for pos, op in enumerate(program):
        code, args = op.code, op.args
        if code == "EMIT":
            if pos != len(program) - 1:
                return Malformed(f"instructions after EMIT at {pos}")
            if not stack:
                return Malformed("empty stack at EMIT")
            result = _cell_value(table, stack[-1])
            if not math.isfinite(result):
                return Malformed("non-finite result")
            return result
        if code == "SELECT":
            s, c = args
            if not (0 <= s < ns and 0 <= c < nc):
                return Malformed(f"SELECT s{s} c{c} out of range at {pos}")
            if len(stack) >= MAX_STACK:
                return Malformed(f"stack overflow at {pos}")
            stack.append(("cell", s, c))
            continue
        if code == "RANK_K":
            (k,) = args
            if ns < 2 or not 1 <= k <= nc:
                return Malformed(f"RANK_K {k} invalid for a {ns}x{nc} table at {pos}")
            if len(stack) >= MAX_STACK:
                return Malformed(f"stack overflow at {pos}")
            row = table.values[0]
            # rank of c = cells strictly larger, plus equal cells to its left
            for c in range(nc):
                rank = 1 + sum(1 for j in range(nc) if row[j] > row[c] or (row[j] == row[c] and j < c))
                if rank == k:
                    stack.append(("cell", 0, c))
                    break
            continue
        if code == "READ_PAIRED":
            if not stack or stack[-1][0] != "cell":
                return Malformed(f"READ_PAIRED needs a cell operand at {pos}")
            _, s, c = stack.pop()
            if s + 1 >= ns:
                return Malformed(f"READ_PAIRED: series {s} has no paired series at {pos}")
            stack.append(("cell", s + 1, c))
            continue
        if code in ("DIFF", "RATIO"):
            if len(stack) < 2:
                return Malformed(f"{code} needs two operands at {pos}")
            top = stack.pop()
            below = stack.pop()
            x, y = _cell_value(table, below), _cell_value(table, top)
            if code == "DIFF":
                stack.append(("scalar", x - y))
            elif y == 0:
                return Malformed(f"division by zero at {pos}")
            else:
                stack.append(("scalar", x / y))
            continue
        if code in ("ARGMAX_ROW", "ARGMIN_ROW", "SUM_ROW", "MEAN_ROW"):
            if not stack:
                return Malformed(f"{code} on empty stack at {pos}")
            item = stack.pop()
            if item[0] != "cell":
                return Malformed(f"{code} needs a cell operand at {pos}")
            s = item[1]
            row = table.values[s]
            if code == "SUM_ROW":
                stack.append(("scalar", math.fsum(row)))
            elif code == "MEAN_ROW":
                stack.append(("scalar", math.fsum(row) / nc))
            else:
                best = 0
                for c in range(1, nc):
                    if (row[c] > row[best]) if code == "ARGMAX_ROW" else (row[c] < row[best]):
                        best = c
                stack.append(("cell", s, best))
            continue
        return Malformed(f"unknown instruction {code!r} at {pos}")
    return Malformed("missing EMIT")


# --------------------------------------------------------------------------
# Generation
# --------------------------------------------------------------------------

def _query_text(table: ChartTable, kind: str, args: tuple[int, ...]) -> str:
    s = table.series_labels
    c = table.category_labels
    if kind == "extract_cell":
        return f"What is the {s[args[0]]} of {c[args[1]]}?"
    if kind == "argmax_value":
        return f"What is the highest {s[args[0]]} across all categories?"
    if kind == "argmin_value":
        return f"What is the lowest {s[args[0]]} across all categories?"
    if kind == "sum_series":
        return f"What is the total {s[args[0]]} over all categories?"
    if kind == "mean_series":
        return f"What is the average {s[args[0]]} over all categories?"
    if kind == "rank_k_then_read":
        ordinal = {1: "highest", 2: "second highest", 3: "third highest", 4: "fourth highest"}[args[0]]
        return f"Provide the {s[1]} of the item with the {ordinal} {s[0]}."
    if kind == "diff_two_cells":
        return f"By how much does the {s[args[0]]} of {c[args[1]]} exceed that of {c[args[2]]}?"
    if kind == "ratio_two_cells":
        return f"What is the ratio of the {s[args[0]]} of {c[args[1]]} to that of {c[args[2]]}?"
    if kind == "cross_series_compare":
        return f"At {c[args[2]]}, by how much does {s[args[0]]} exceed {s[args[1]]}?"
    raise AssertionError(kind)


def make_task(task_id: str, table: ChartTable, kind: str, args: Sequence[int],
              perturbation: PerturbationKind | None = None) -> ChartTask:
    """Assemble a task, filling in query text and ground truth from the oracle."""
    table.validate()
    args = tuple(int(a) for a in args)
    query = Query(kind, args, _query_text(table, kind, args))
    truth = oracle_answer(table, query)
    if not math.isfinite(truth):
        raise ValueError(f"non-finite ground truth for {task_id}")
    return ChartTask(task_id, table, query, truth, query.difficulty, perturbation)


def generate_task(seed: int, difficulty: str, config: EnvConfig = EnvConfig()) -> ChartTask:
    """Deterministically generate one task for ``(seed, difficulty, config)``."""
    config.validate()
    if difficulty not in ("easy", "hard"):
        raise ConfigError(f"difficulty must be 'easy' or 'hard', got {difficulty!r}")
    if seed < 0 or seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    rng = np.random.default_rng([seed, 0 if difficulty == "easy" else 1])

    if difficulty == "easy":
        kind = "extract_cell"
    else:
        kind = HARD_KINDS[int(rng.integers(len(HARD_KINDS)))]
    needs_pair = kind in ("rank_k_then_read", "cross_series_compare")
    lo_series = max(config.min_series, 2) if needs_pair else config.min_series
    if lo_series > config.max_series:
        raise ConfigError(f"{kind} needs at least 2 series but max_series={config.max_series}")
    ns = int(rng.integers(lo_series, config.max_series + 1))
    nc = int(rng.integers(config.min_categories, config.max_categories + 1))

    ticks = int(round(config.value_max * 10))
    values = rng.integers(0, ticks, size=(ns, nc)) / 10.0
    chart_kind = CHART_KINDS[int(rng.integers(len(CHART_KINDS)))]
    if chart_kind == "bar" and ns > 1:
        chart_kind = "grouped_bar"
    elif chart_kind == "grouped_bar" and ns == 1:
        chart_kind = "bar"
    series_labels = tuple(str(x) for x in rng.choice(_SERIES_NAMES, size=ns, replace=False))
    category_labels = tuple(str(x) for x in rng.choice(_CATEGORY_NAMES, size=nc, replace=False))

    s = int(rng.integers(ns))
    if kind == "extract_cell":
        args = (s, int(rng.integers(nc)))
    elif kind in ("argmax_value", "argmin_value", "sum_series", "mean_series"):
        args = (s,)
    elif kind == "rank_k_then_read":
        args = (int(rng.integers(1, min(MAX_RANK, nc) + 1)),)
    elif kind in ("diff_two_cells", "ratio_two_cells"):
        c1, c2 = (int(x) for x in rng.choice(nc, size=2, replace=False))
        if kind == "ratio_two_cells":
            while values[s, c2] == 0.0:
                values[s, c2] = rng.integers(1, ticks) / 10.0
        args = (s, c1, c2)
    else:
        other = int(rng.integers(ns - 1))
        args = (s, other + (other >= s), int(rng.integers(nc)))

    table = ChartTable(
        chart_kind=chart_kind,
        series_labels=series_labels,
        category_labels=category_labels,
        values=tuple(tuple(float(x) for x in row) for row in values),
    )
    return make_task(f"{difficulty}-{seed}", table, kind, args)


def generate_corpus(count: int, difficulty: str, seed: int = 0,
                    config: EnvConfig = EnvConfig()) -> list[ChartTask]:
    """``count`` tasks with per-task seeds ``seed * 2**20 + i``."""
    if count < 0 or count >= 2**20:
        raise ConfigError("count must be in [0, 2**20)")
    return [generate_task(seed * 2**20 + i, difficulty, config) for i in range(count)]


# --------------------------------------------------------------------------
# Perturbations
# --------------------------------------------------------------------------

def _remap_args(kind: str, args: tuple[int, ...], series_map=None, category_map=None) -> tuple[int, ...]:
    out = []
    for name, value in zip(QUERY_ARGS[kind], args):
        if series_map is not None and name in ("series", "series2"):
            value = series_map[value]
        elif category_map is not None and name in ("category", "category2"):
            value = category_map[value]
        out.append(value)
    return tuple(out)


def perturb_task(task: ChartTask, kind: PerturbationKind | str, seed: int) -> ChartTask:
    """Apply one structural perturbation; ground truth is recomputed by the oracle."""
    kind = PerturbationKind(kind)
    if task.perturbation is not None:
        raise UnsupportedPerturbation(f"{task.task_id} is already perturbed ({task.perturbation.value})")
    rng = np.random.default_rng([seed, list(PerturbationKind).index(kind)])
    table, query = task.table, task.query
    values = [list(row) for row in table.values]
    ns, nc = table.num_series, table.num_categories
    qkind, args = query.kind, query.args
    series_labels = list(table.series_labels)
    category_labels = list(table.category_labels)
    chart_kind = table.chart_kind

    if kind is PerturbationKind.SERIES_REORDER:
        # new position i holds old series perm[i]; rank queries pin the axis pair
        fixed = 2 if qkind == "rank_k_then_read" else 0
        perm = list(range(fixed)) + [fixed + int(x) for x in rng.permutation(ns - fixed)]
        inverse = {old: new for new, old in enumerate(perm)}
        values = [values[p] for p in perm]
        series_labels = [series_labels[p] for p in perm]
        args = _remap_args(qkind, args, series_map=inverse)
    elif kind is PerturbationKind.CATEGORY_REORDER:
        perm = [int(x) for x in rng.permutation(nc)]
        inverse = {old: new for new, old in enumerate(perm)}
        values = [[row[p] for p in perm] for row in values]
        category_labels = [category_labels[p] for p in perm]
        args = _remap_args(qkind, args, category_map=inverse)
    elif kind is PerturbationKind.VALUE_RESCALE:
        factor = RESCALE_FACTORS[int(rng.integers(len(RESCALE_FACTORS)))]
        values = [[x * factor for x in row] for row in values]
    elif kind is PerturbationKind.LABEL_RENAME:
        series_labels = [f"Series {i + 1}" for i in range(ns)]
        offset = int(rng.integers(1000))
        category_labels = [f"Item {offset + j}" for j in range(nc)]
    elif kind is PerturbationKind.AXIS_TRANSPOSE:
        if ns < 2 or nc > MAX_SERIES:
            raise UnsupportedPerturbation(
                f"axis_transpose needs 2..{MAX_SERIES} categories and >=2 series, table is {ns}x{nc}"
            )
        if qkind == "extract_cell":
            args = (args[1], args[0])
        elif qkind == "diff_two_cells":
            qkind, args = "cross_series_compare", (args[1], args[2], args[0])
        elif qkind == "cross_series_compare":
            qkind, args = "diff_two_cells", (args[2], args[0], args[1])
        else:
            raise UnsupportedPerturbation(f"{qkind} has no equivalent query on the transposed chart")
        values = [list(col) for col in zip(*values)]
        series_labels, category_labels = category_labels, series_labels
        chart_kind = "grouped_bar" if chart_kind == "bar" else chart_kind
    elif kind is PerturbationKind.DISTRACTOR_SERIES:
        if ns >= MAX_SERIES:
            raise UnsupportedPerturbation(f"table already has {MAX_SERIES} series")
        where = int(rng.integers(2 if qkind == "rank_k_then_read" else 0, ns + 1))
        extra = [float(x) / 10.0 for x in rng.integers(0, 10000, size=nc)]
        values.insert(where, extra)
        series_labels.insert(where, f"Distractor {int(rng.integers(100))}")
        args = _remap_args(qkind, args, series_map={i: i + (i >= where) for i in range(ns)})
        if chart_kind == "bar":
            chart_kind = "grouped_bar"
    else:  # pragma: no cover
        raise AssertionError(kind)

    new_table = ChartTable(
        chart_kind=chart_kind,
        series_labels=tuple(series_labels),
        category_labels=tuple(category_labels),
        values=tuple(tuple(row) for row in values),
    )
    return make_task(f"{task.task_id}+{kind.value}", new_table, qkind, args, perturbation=kind)


# --------------------------------------------------------------------------
# Featurization
# --------------------------------------------------------------------------

# Layout of the fixed-width feature vector.
_VALUES = slice(0, 32)
_MASK = slice(32, 64)
_KIND = slice(64, 64 + len(QUERY_KINDS))
_SLOT_NAMES = ("series_a", "series_b", "cat_a", "cat_b", "rank")
_SLOT_SIZES = (MAX_SERIES, MAX_SERIES, MAX_CATEGORIES, MAX_CATEGORIES, MAX_RANK)
_ORD = slice(_KIND.stop, _KIND.stop + 5)
_PRESENT = slice(_ORD.stop, _ORD.stop + 5)
_ONEHOT_START = _PRESENT.stop
FEATURE_DIM = _ONEHOT_START + sum(_SLOT_SIZES)


def query_slots(query: Query) -> dict[str, int]:
    """Map positional query args onto role slots shared by all kinds.

    Slot ``series_a``/``cat_a`` name the first cell a program reads and
    ``series_b``/``cat_b`` the second, so the same slot means the same thing
    across query kinds.
    """
    a = query.args
    kind = query.kind
    if kind == "extract_cell":
        return {"series_a": a[0], "cat_a": a[1]}
    if kind in ("argmax_value", "argmin_value", "sum_series", "mean_series"):
        return {"series_a": a[0]}
    if kind == "rank_k_then_read":
        return {"series_a": 0, "series_b": 1, "rank": a[0]}
    if kind in ("diff_two_cells", "ratio_two_cells"):
        return {"series_a": a[0], "cat_a": a[1], "series_b": a[0], "cat_b": a[2]}
    if kind == "cross_series_compare":
        return {"series_a": a[0], "series_b": a[1], "cat_a": a[2], "cat_b": a[2]}
    raise ValueError(f"unknown query kind {kind!r}")


def featurize(task: ChartTask) -> np.ndarray:
    """Fixed-width encoding of a task (labels are not encoded).

    Layout (``FEATURE_DIM`` = 111):
      [0, 32)    values, 4x8 row-major, divided by the task's max value
      [32, 64)   presence mask for the same cells
      [64, 73)   query kind one-hot
      [73, 78)   slot ordinals (series/3, category/7, (rank-1)/3)
      [78, 83)   slot presence bits
      [83, 111)  slot one-hots (4, 4, 8, 8, 4 wide)
    """
    out = np.zeros(FEATURE_DIM)
    vals = np.asarray(task.table.values, dtype=float)
    ns, nc = vals.shape
    grid = np.zeros((MAX_SERIES, MAX_CATEGORIES))
    mask = np.zeros((MAX_SERIES, MAX_CATEGORIES))
    top = float(np.max(np.abs(vals)))
    if top > 0:
        grid[:ns, :nc] = vals / top
    mask[:ns, :nc] = 1.0
    out[_VALUES] = grid.ravel()
    out[_MASK] = mask.ravel()
    out[_KIND.start + QUERY_KINDS.index(task.query.kind)] = 1.0

    slots = query_slots(task.query)
    offset = _ONEHOT_START
    for i, (name, size) in enumerate(zip(_SLOT_NAMES, _SLOT_SIZES)):
        if name in slots:
            idx = slots[name] - 1 if name == "rank" else slots[name]
            out[_ORD.start + i] = idx / (size - 1)
            out[_PRESENT.start + i] = 1.0
            out[offset + idx] = 1.0
        offset += size
    return out


# --------------------------------------------------------------------------
# JSONL corpus
# --------------------------------------------------------------------------

def task_to_dict(task: ChartTask) -> dict:
    t = task.table
    return {
        "task_id": task.task_id,
        "chart_kind": t.chart_kind,
        "series_labels": list(t.series_labels),
        "category_labels": list(t.category_labels),
        "values": [list(row) for row in t.values],
        "query": {"kind": task.query.kind, "args": list(task.query.args), "text": task.query.text},
        "ground_truth": task.ground_truth,
        "difficulty": task.difficulty,
        "perturbation": task.perturbation.value if task.perturbation else None,
    }


def task_from_dict(d: dict) -> ChartTask:
    table = ChartTable(
        chart_kind=d["chart_kind"],
        series_labels=tuple(d["series_labels"]),
        category_labels=tuple(d["category_labels"]),
        values=tuple(tuple(float(x) for x in row) for row in d["values"]),
    )
    table.validate()
    q = d["query"]
    pert = d.get("perturbation")
    return ChartTask(
        task_id=d["task_id"],
        table=table,
        query=Query(q["kind"], tuple(int(a) for a in q["args"]), q.get("text", "")),
        ground_truth=float(d["ground_truth"]),
        difficulty=d["difficulty"],
        perturbation=PerturbationKind(pert) if pert else None,
    )


def write_tasks(path: str | Path, tasks: Iterable[ChartTask]) -> None:
    with open(path, "w") as fh:
        for task in tasks:
            fh.write(json.dumps(task_to_dict(task), sort_keys=True) + "\n")


def read_tasks(path: str | Path) -> list[ChartTask]:
    with open(path) as fh:
        return [task_from_dict(json.loads(line)) for line in fh if line.strip()]
