"""Policy output vocabulary, template rendering, parsing and grammar checks.

A response is a sequence of token ids. Template tags are tokens, so the
policy can get the format wrong. A grammar-conforming sequence renders as::

    <thinking> SELECT s0 c1 </thinking><answer>```json {"answer": "EMIT"} ```</answer>

Anything else renders as a space-separated transcript of token symbols.
"""

from __future__ import annotations

import enum
import functools
import json
import re
from dataclasses import dataclass
from collections import deque
from typing import Sequence

import numpy as np

from .chartenv import MAX_CATEGORIES, MAX_RANK, MAX_SERIES, DslOp, Malformed
from .errors import ParseError

MAX_LEN = 24
VOCAB_VERSION = 1


class Tok(enum.IntEnum):
    THINK_OPEN = 0
    THINK_CLOSE = 1
    ANSWER_OPEN = 2
    ANSWER_CLOSE = 3
    SELECT = 4
    S0 = 5
    S1 = 6
    S2 = 7
    S3 = 8
    C0 = 9
    C1 = 10
    C2 = 11
    C3 = 12
    C4 = 13
    C5 = 14
    C6 = 15
    C7 = 16
    ARGMAX_ROW = 17
    ARGMIN_ROW = 18
    RANK_K = 19
    K1 = 20
    K2 = 21
    K3 = 22
    K4 = 23
    READ_PAIRED = 24
    DIFF = 25
    RATIO = 26
    SUM_ROW = 27
    MEAN_ROW = 28
    EMIT = 29
    EOS = 30


VOCAB_SIZE = len(Tok)

_TAG_SYMBOLS = {
    Tok.THINK_OPEN: "<thinking>",
    Tok.THINK_CLOSE: "</thinking>",
    Tok.ANSWER_OPEN: "<answer>",
    Tok.ANSWER_CLOSE: "</answer>",
    Tok.EOS: "<eos>",
}


def _symbol(tok: Tok) -> str:
    if tok in _TAG_SYMBOLS:
        return _TAG_SYMBOLS[tok]
    if Tok.S0 <= tok <= Tok.S3 or Tok.C0 <= tok <= Tok.C7 or Tok.K1 <= tok <= Tok.K4:
        return tok.name.lower()
    return tok.name


SYMBOLS: tuple[str, ...] = tuple(_symbol(t) for t in Tok)
_SYMBOL_TO_ID = {s: i for i, s in enumerate(SYMBOLS)}

TAGS = frozenset({Tok.THINK_OPEN, Tok.THINK_CLOSE, Tok.ANSWER_OPEN, Tok.ANSWER_CLOSE})
SERIES_TOKENS = tuple(range(Tok.S0, Tok.S3 + 1))
CATEGORY_TOKENS = tuple(range(Tok.C0, Tok.C7 + 1))
RANK_TOKENS = tuple(range(Tok.K1, Tok.K4 + 1))
_UNARY = {Tok.ARGMAX_ROW, Tok.ARGMIN_ROW, Tok.SUM_ROW, Tok.MEAN_ROW, Tok.READ_PAIRED}
_BINARY = {Tok.DIFF, Tok.RATIO}

ANSWER_SUFFIX = ' </thinking><answer>```json {"answer": "EMIT"} ```</answer>'
_TEMPLATE_RE = re.compile(r"<thinking> (.+)" + re.escape(ANSWER_SUFFIX), re.DOTALL)
_CLOSING = (Tok.THINK_CLOSE, Tok.ANSWER_OPEN, Tok.EMIT, Tok.ANSWER_CLOSE, Tok.EOS)


def vocabulary_manifest() -> dict:
    return {
        "version": VOCAB_VERSION,
        "max_len": MAX_LEN,
        "tokens": [{"id": int(t), "name": t.name, "symbol": SYMBOLS[t]} for t in Tok],
    }


def vocabulary_json() -> str:
    return json.dumps(vocabulary_manifest(), sort_keys=True)


# --------------------------------------------------------------------------
# Grammar
# --------------------------------------------------------------------------

def _split_body(body: Sequence[int]) -> list[DslOp] | None:
    """Operation tokens to ``DslOp`` list, or None if arguments are ill-formed."""
    ops: list[DslOp] = []
    i = 0
    n = len(body)
    while i < n:
        t = body[i]
        if t == Tok.SELECT:
            if i + 2 >= n:
                return None
            s, c = body[i + 1], body[i + 2]
            if s not in SERIES_TOKENS or c not in CATEGORY_TOKENS:
                return None
            ops.append(DslOp("SELECT", (s - Tok.S0, c - Tok.C0)))
            i += 3
        elif t == Tok.RANK_K:
            if i + 1 >= n or body[i + 1] not in RANK_TOKENS:
                return None
            ops.append(DslOp("RANK_K", (body[i + 1] - Tok.K1 + 1,)))
            i += 2
        elif t in _UNARY or t in _BINARY:
            ops.append(DslOp(Tok(t).name))
            i += 1
        else:
            return None
    return ops


def validate_grammar(tokens: Sequence[int]) -> bool:
    """True iff ``tokens`` is exactly the response template around >= 1 operation."""
    n = len(tokens)
    if n > MAX_LEN or n < 2 + len(_CLOSING):
        return False
    if tokens[0] != Tok.THINK_OPEN or tuple(tokens[-5:]) != _CLOSING:
        return False
    ops = _split_body(tokens[1:-5])
    return bool(ops)


def extract_program(tokens: Sequence[int]) -> list[DslOp] | Malformed:
    """Executor program for a grammar-valid response, else ``Malformed``."""
    if not validate_grammar(tokens):
        return Malformed("response does not follow the template grammar")
    return _split_body(tokens[1:-5]) + [DslOp("EMIT")]


def program_tokens(program: Sequence[DslOp]) -> tuple[int, ...]:
    """Wrap a program (ending in EMIT) in the response template."""
    if not program or program[-1].code != "EMIT":
        raise ValueError("program must end with EMIT")
    body: list[int] = []
    for op in program[:-1]:
        if op.code == "SELECT":
            s, c = op.args
            if not (0 <= s < MAX_SERIES and 0 <= c < MAX_CATEGORIES):
                raise ValueError(f"SELECT args {op.args} outside the vocabulary")
            body += [Tok.SELECT, Tok.S0 + s, Tok.C0 + c]
        elif op.code == "RANK_K":
            (k,) = op.args
            if not 1 <= k <= MAX_RANK:
                raise ValueError(f"RANK_K arg {k} outside the vocabulary")
            body += [Tok.RANK_K, Tok.K1 + k - 1]
        else:
            body.append(Tok[op.code])
    return tuple(int(t) for t in (Tok.THINK_OPEN, *body, *_CLOSING))


# --------------------------------------------------------------------------
# Text
# --------------------------------------------------------------------------

def render(tokens: Sequence[int]) -> str:
    if validate_grammar(tokens):
        return "<thinking> " + " ".join(SYMBOLS[t] for t in tokens[1:-5]) + ANSWER_SUFFIX
    return " ".join(SYMBOLS[t] for t in tokens)


def _words(text: str, offset: int) -> list[tuple[int, int]]:
    """Split on single spaces into (token id, char position)."""
    out = []
    pos = offset
    for word in text.split(" "):
        tok = _SYMBOL_TO_ID.get(word)
        if tok is None:
            raise ParseError(f"unknown token {word!r}", pos)
        out.append((tok, pos))
        pos += len(word) + 1
    return out


def parse(text: str) -> tuple[int, ...]:
    """Inverse of :func:`render`; raises :class:`ParseError` outside its image.

    Transcripts are accepted only when no longer than ``MAX_LEN`` and with
    every opened tag closed before another tag opens.
    """
    if text == "":
        return ()
    m = _TEMPLATE_RE.fullmatch(text)
    if m:
        body = [t for t, _ in _words(m.group(1), len("<thinking> "))]
        tokens = (Tok.THINK_OPEN, *body, *_CLOSING)
        if not validate_grammar(tokens):
            raise ParseError("template body is not a well-formed program", len("<thinking> "))
        return tuple(int(t) for t in tokens)

    words = _words(text, 0)
    if len(words) > MAX_LEN:
        raise ParseError(f"sequence longer than {MAX_LEN} tokens", words[MAX_LEN][1])
    open_tag = None
    for tok, pos in words:
        if tok in (Tok.THINK_OPEN, Tok.ANSWER_OPEN):
            if open_tag is not None:
                raise ParseError(f"{SYMBOLS[tok]} inside unclosed {SYMBOLS[open_tag]}", pos)
            open_tag = tok
        elif tok in (Tok.THINK_CLOSE, Tok.ANSWER_CLOSE):
            if open_tag != tok - 1:
                raise ParseError(f"unbalanced {SYMBOLS[tok]}", pos)
            open_tag = None
    if open_tag is not None:
        raise ParseError(f"unclosed {SYMBOLS[open_tag]}", len(text))
    tokens = tuple(t for t, _ in words)
    if validate_grammar(tokens):
        raise ParseError("template-conforming sequence written as a transcript", 0)
    return tokens


# --------------------------------------------------------------------------
# Structural mask automaton
# --------------------------------------------------------------------------
# State: (phase, stack, pending). ``stack`` holds operand types ("c" cell,
# "s" scalar) and is capped at depth 2; ``pending`` names an expected
# argument token ("S", "C" or "K"). The automaton accepts exactly the
# grammar-valid sequences whose programs also type-check.

START = (0, (), None)
DONE = (6, (), None)
BROKEN = (-1, (), None)


def step_state(state: tuple, tok: int) -> tuple:
    """Transition; returns ``BROKEN`` for any token the automaton rejects."""
    phase, stack, pending = state
    if phase == 0:
        return (1, (), None) if tok == Tok.THINK_OPEN else BROKEN
    if phase == 1:
        if pending == "S":
            return (1, stack, "C") if tok in SERIES_TOKENS else BROKEN
        if pending == "C":
            return (1, stack + ("c",), None) if tok in CATEGORY_TOKENS else BROKEN
        if pending == "K":
            return (1, stack + ("c",), None) if tok in RANK_TOKENS else BROKEN
        top = stack[-1] if stack else None
        if tok == Tok.SELECT:
            return (1, stack, "S") if len(stack) < 2 else BROKEN
        if tok in (Tok.ARGMAX_ROW, Tok.ARGMIN_ROW, Tok.READ_PAIRED):
            return state if top == "c" else BROKEN
        if tok in (Tok.SUM_ROW, Tok.MEAN_ROW):
            return (1, stack[:-1] + ("s",), None) if top == "c" else BROKEN
        if tok == Tok.RANK_K:
            return (1, stack, "K") if len(stack) < 2 else BROKEN
        if tok in (Tok.DIFF, Tok.RATIO):
            return (1, ("s",), None) if len(stack) == 2 else BROKEN
        if tok == Tok.THINK_CLOSE:
            return (2, (), None) if len(stack) == 1 else BROKEN
        return BROKEN
    if 2 <= phase <= 5:
        return (phase + 1, (), None) if tok == _CLOSING[phase - 1] else BROKEN
    return BROKEN


@functools.lru_cache(maxsize=None)
def _distances() -> dict:
    """Minimum number of tokens from each reachable state to ``DONE``."""
    edges: dict[tuple, list[tuple]] = {}
    frontier = deque([START])
    seen = {START}
    while frontier:
        s = frontier.popleft()
        edges[s] = []
        for t in range(VOCAB_SIZE):
            n = step_state(s, t)
            if n == BROKEN:
                continue
            edges[s].append(n)
            if n not in seen:
                seen.add(n)
                frontier.append(n)
    reverse: dict[tuple, list[tuple]] = {s: [] for s in seen}
    for s, outs in edges.items():
        for n in outs:
            reverse[n].append(s)
    dist = {DONE: 0}
    frontier = deque([DONE])
    while frontier:
        s = frontier.popleft()
        for p in reverse[s]:
            if p not in dist:
                dist[p] = dist[s] + 1
                frontier.append(p)
    return dist


@functools.lru_cache(maxsize=None)
def allowed_tokens(state: tuple, remaining: int) -> np.ndarray:
    """Boolean vocabulary mask of tokens that keep a completion within budget.

    ``remaining`` counts the tokens still available including this one.
    ``BROKEN`` and ``DONE`` states allow nothing.
    """
    mask = np.zeros(VOCAB_SIZE, dtype=bool)
    if state in (BROKEN, DONE):
        return mask
    dist = _distances()
    for t in range(VOCAB_SIZE):
        n = step_state(state, t)
        if n != BROKEN and 1 + dist.get(n, MAX_LEN + 1) <= remaining:
            mask[t] = True
    mask.setflags(write=False)
    return mask


def structural_masks(tokens: Sequence[int], length: int | None = None) -> np.ndarray:
    """Allowed-token masks for every position of ``tokens`` (shape T x V)."""
    T = len(tokens) if length is None else length
    out = np.zeros((T, VOCAB_SIZE), dtype=bool)
    state = START
    for t in range(T):
        out[t] = allowed_tokens(state, MAX_LEN - t)
        if t < len(tokens):
            state = step_state(state, tokens[t])
    return out


# --------------------------------------------------------------------------
# Response value
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Response:
    tokens: tuple[int, ...]
    text: str
    program: tuple[DslOp, ...] | None

    @classmethod
    def from_tokens(cls, tokens: Sequence[int]) -> "Response":
        tokens = tuple(int(t) for t in tokens)
        program = extract_program(tokens)
        return cls(tokens, render(tokens), None if isinstance(program, Malformed) else tuple(program))
