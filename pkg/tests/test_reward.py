import json
from fractions import Fraction

import pytest
from hypothesis import assume, given, settings, strategies as st

from chartrl.chartenv import MALFORMED, DslOp
from chartrl.errors import ConfigError
from chartrl.response import Response, Tok, program_tokens, render
from chartrl.reward import (
    RewardConfig,
    accuracy_reward,
    format_reward,
    grade_jsonl,
    score_response,
    score_text,
)
from conftest import task

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def exact_accuracy(vp, vg, tau=0.05, zero_guard=1e-9):
    err = abs(Fraction(vp) - Fraction(vg))
    if abs(vg) < zero_guard:
        return int(err <= Fraction(tau))
    return int(err <= Fraction(tau) * abs(Fraction(vg)))


def test_accuracy_examples():
    assert accuracy_reward(94, 94) == 1
    assert accuracy_reward(12.0, 12.8) == 0  # relative error 0.0625
    assert accuracy_reward(MALFORMED, 12.8) == 0
    assert accuracy_reward(None, 12.8) == 0
    assert accuracy_reward(float("nan"), 12.8) == 0
    assert accuracy_reward(float("inf"), 12.8) == 0


def test_accuracy_scan_around_12_8():
    # boundary at 12.8 * 0.05 = 0.64; the exact boundary points are float-ambiguous
    for vp in (12.17, 12.8, 13.43):
        assert accuracy_reward(vp, 12.8) == 1
    for vp in (12.15, 13.45, -12.8):
        assert accuracy_reward(vp, 12.8) == 0


def test_zero_guard_switches_to_absolute():
    assert accuracy_reward(0.04, 0.0) == 1
    assert accuracy_reward(0.06, 0.0) == 0
    assert accuracy_reward(-0.05, 0.0) == 1


@settings(max_examples=500, deadline=None)
@given(finite, finite)
def test_accuracy_matches_exact_oracle(vp, vg):
    rel = abs(vp - vg) / max(abs(vg), 1e-300)
    assume(abs(rel - 0.05) > 1e-9)
    assert accuracy_reward(vp, vg) == exact_accuracy(vp, vg)


@settings(max_examples=300, deadline=None)
@given(finite, st.floats(1e-3, 1e3), st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
def test_scale_consistency(vp, vg, c):
    assert accuracy_reward(vp * c, vg * c) == accuracy_reward(vp, vg)


@settings(max_examples=300, deadline=None)
@given(finite, finite, st.floats(1e-4, 0.9), st.floats(1e-4, 0.9))
def test_tau_monotone(vp, vg, t1, t2):
    lo, hi = sorted((t1, t2))
    if accuracy_reward(vp, vg, RewardConfig(tau=lo)):
        assert accuracy_reward(vp, vg, RewardConfig(tau=hi))


def test_format_examples():
    seq = program_tokens([DslOp("SELECT", (0, 0)), DslOp("EMIT")])
    assert format_reward(render(seq)) == 1
    assert format_reward("") == 0
    assert format_reward('<answer>```json {"answer": "EMIT"} ```</answer><thinking> SELECT s0 c0 </thinking>') == 0
    assert format_reward("<thinking> SELECT s0 c0 </thinking>") == 0


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=64))
def test_format_total_on_bytes(raw):
    assert format_reward(raw.decode("latin-1")) in (0, 1)


def test_score_response_examples():
    t = task([[5.0, 7.0], [1.0, 2.0]], "extract_cell", (0, 1))
    right = Response.from_tokens(program_tokens([DslOp("SELECT", (0, 1)), DslOp("EMIT")]))
    wrong = Response.from_tokens(program_tokens([DslOp("SELECT", (1, 1)), DslOp("EMIT")]))
    broken = Response.from_tokens([Tok.SELECT, Tok.S0])
    r = score_response(t, right)
    assert (r.accuracy, r.format, r.total) == (1, 1, 2.0)
    r = score_response(t, wrong)
    assert (r.accuracy, r.format, r.total) == (0, 1, 1.0)
    r = score_response(t, broken)
    assert (r.accuracy, r.format, r.total) == (0, 0, 0.0)


def test_weights_combine():
    t = task([[5.0, 7.0]], "extract_cell", (0, 1))
    right = Response.from_tokens(program_tokens([DslOp("SELECT", (0, 1)), DslOp("EMIT")]))
    r = score_response(t, right, RewardConfig(weight_accuracy=2.0, weight_format=0.5))
    assert r.total == 2.5


def test_format_ignores_table_values():
    seq = program_tokens([DslOp("SELECT", (3, 7)), DslOp("EMIT")])
    small = task([[1.0, 2.0]], "extract_cell", (0, 0))
    big = task([[float(i + j) for j in range(8)] for i in range(4)], "extract_cell", (3, 7))
    assert score_response(small, Response.from_tokens(seq)).format == 1
    assert score_response(big, Response.from_tokens(seq)).format == 1
    assert score_response(small, Response.from_tokens(seq)).accuracy == 0


def test_config_validation():
    for bad in (RewardConfig(tau=0.0), RewardConfig(tau=1.0), RewardConfig(weight_accuracy=-1),
                RewardConfig(weight_accuracy=0, weight_format=0), RewardConfig(zero_guard=-1)):
        with pytest.raises(ConfigError):
            bad.validate()


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=60))
def test_score_text_total(text):
    t = task([[5.0, 7.0]], "extract_cell", (0, 1))
    r = score_text(t, text)
    assert r.accuracy in (0, 1) and r.format in (0, 1)


def test_grade_jsonl(tmp_path):
    t = task([[5.0, 7.0]], "extract_cell", (0, 1), task_id="a")
    good = render(program_tokens([DslOp("SELECT", (0, 1)), DslOp("EMIT")]))
    src = tmp_path / "in.jsonl"
    src.write_text(json.dumps({"task_id": "a", "response_text": good}) + "\n"
                   + json.dumps({"task_id": "a", "response_text": "garbage"}) + "\n")
    out = tmp_path / "out.jsonl"
    assert grade_jsonl({"a": t}, src, out) == 2
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert rows == [
        {"task_id": "a", "accuracy": 1, "format": 1, "total": 2.0},
        {"task_id": "a", "accuracy": 0, "format": 0, "total": 0.0},
    ]
