import json
from pathlib import Path

import pytest

from chartrl.chartenv import ChartTable, make_task

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


def table(values, chart_kind="grouped_bar"):
    """Small labelled table for hand-built tasks."""
    ns, nc = len(values), len(values[0])
    return ChartTable(
        chart_kind=chart_kind if ns > 1 or chart_kind != "grouped_bar" else "bar",
        series_labels=tuple(f"S{i}" for i in range(ns)),
        category_labels=tuple(f"C{j}" for j in range(nc)),
        values=tuple(tuple(float(x) for x in row) for row in values),
    )


def task(values, kind, args, task_id="t"):
    return make_task(task_id, table(values), kind, args)


def pytest_terminal_summary(terminalreporter):
    lines = [
        value
        for reports in terminalreporter.stats.values()
        for rep in reports
        if getattr(rep, "when", None) == "call"
        for key, value in getattr(rep, "user_properties", [])
        if key == "acceptance"
    ]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
