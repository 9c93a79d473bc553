"""Autoregressive categorical policy over the response vocabulary.

Each step sees the previous token's embedding, the task feature vector and a
positional encoding, passes them through two tanh layers, and reads out one
logit per token. Forward and backward passes are written out by hand and
operate on flat batches of (sequence, position) rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .chartenv import FEATURE_DIM, ChartTask, featurize
from .errors import UpdateRejected
from .response import (
    BROKEN,
    MAX_LEN,
    START,
    VOCAB_SIZE,
    Tok,
    allowed_tokens,
    step_state,
    vocabulary_manifest,
)

EMBED_DIM = 16
HIDDEN_DIM = 64
POS_DIM = 8
BOS = VOCAB_SIZE  # input-only embedding row
INPUT_DIM = EMBED_DIM + FEATURE_DIM + POS_DIM
PARAM_NAMES = ("embedding", "W1", "b1", "W2", "b2", "W_out", "b_out")
PARAMS_VERSION = "chartrl-policy-1"

# Logit penalty applied to structurally invalid tokens when hard masking is
# off. It stands in for the template habits of a pretrained instruct model:
# invalid tokens stay reachable and the format still has to be learned.
TEMPLATE_PRIOR = 6.0


def positional_encoding(pos: int | np.ndarray) -> np.ndarray:
    """Sin/cos pairs at angular rates pi/2, pi/4, pi/8, pi/16."""
    pos = np.asarray(pos, dtype=float)
    rates = math.pi / np.array([2.0, 4.0, 8.0, 16.0])
    ang = pos[..., None] * rates
    out = np.empty(pos.shape + (POS_DIM,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


_PE = positional_encoding(np.arange(MAX_LEN))


@dataclass
class PolicyParams:
    embedding: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W_out: np.ndarray
    b_out: np.ndarray
    version: str = PARAMS_VERSION

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{k: v.copy() for k, v in self.tensors().items()}, version=self.version)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes())
        return h.hexdigest()


def param_shapes(vocab: int = VOCAB_SIZE, embed: int = EMBED_DIM, hidden: int = HIDDEN_DIM) -> dict[str, tuple]:
    return {
        "embedding": (vocab + 1, embed),
        "W1": (hidden, embed + FEATURE_DIM + POS_DIM),
        "b1": (hidden,),
        "W2": (hidden, hidden),
        "b2": (hidden,),
        "W_out": (vocab, hidden),
        "b_out": (vocab,),
    }


def init_params(seed: int, scale: float = 1.0) -> PolicyParams:
    """Zero-mean Gaussian weights with std ``scale / sqrt(fan_in)``; biases zero.

    Embedding rows use std ``scale``.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    shapes = param_shapes()
    out = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        if name.startswith("b"):
            out[name] = np.zeros(shape)
        elif name == "embedding":
            out[name] = rng.normal(0.0, scale, size=shape)
        else:
            out[name] = rng.normal(0.0, scale / math.sqrt(shape[1]), size=shape)
    return PolicyParams(**out)


# --------------------------------------------------------------------------
# Masks
# --------------------------------------------------------------------------

def mask_bias(allowed: np.ndarray, masking: bool) -> np.ndarray:
    """Additive logit bias from a boolean allowed-token array.

    With masking, disallowed tokens get -inf. Without, they get
    ``-TEMPLATE_PRIOR``; rows with nothing allowed (a broken prefix) get no
    bias at all.
    """
    if masking:
        return np.where(allowed, 0.0, -np.inf)
    bias = np.where(allowed, 0.0, -TEMPLATE_PRIOR)
    dead = ~allowed.any(axis=-1)
    bias[dead] = 0.0
    return bias


def _sequence_allowed(tokens: Sequence[int]) -> np.ndarray:
    out = np.zeros((len(tokens), VOCAB_SIZE), dtype=bool)
    state = START
    for t, tok in enumerate(tokens):
        out[t] = allowed_tokens(state, MAX_LEN - t)
        state = step_state(state, tok)
    return out


# --------------------------------------------------------------------------
# Forward / backward over flat rows
# --------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Activations for a flat batch of rows, kept for :func:`backward_rows`."""

    prev: np.ndarray
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    probs: np.ndarray
    targets: np.ndarray
    logp: np.ndarray


def _inputs(params: PolicyParams, feats: np.ndarray, prev: np.ndarray, pos: np.ndarray) -> np.ndarray:
    return np.concatenate([params.embedding[prev], feats, _PE[pos]], axis=1)


def forward_rows(params: PolicyParams, feats: np.ndarray, prev: np.ndarray, pos: np.ndarray,
                 bias: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Logits for rows of (features, previous token, position); returns (x, h1, h2, logits)."""
    x = _inputs(params, feats, prev, pos)
    h1 = np.tanh(x @ params.W1.T + params.b1)
    h2 = np.tanh(h1 @ params.W2.T + params.b2)
    logits = h2 @ params.W_out.T + params.b_out + bias
    return x, h1, h2, logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    top = np.max(logits, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    shifted = logits - top
    with np.errstate(divide="ignore"):
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def score_rows(params: PolicyParams, feats: np.ndarray, prev: np.ndarray, pos: np.ndarray,
               bias: np.ndarray, targets: np.ndarray) -> ForwardCache:
    x, h1, h2, logits = forward_rows(params, feats, prev, pos, bias)
    lsm = log_softmax(logits)
    probs = np.exp(lsm)
    logp = lsm[np.arange(len(targets)), targets]
    return ForwardCache(prev, x, h1, h2, probs, targets, logp)


def backward_rows(params: PolicyParams, cache: ForwardCache, coef: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum_r coef[r] * logp[r]`` for every parameter tensor.

    Rows whose target was masked out (``logp == -inf``) contribute nothing.
    """
    coef = np.where(np.isfinite(cache.logp), coef, 0.0)
    dlogits = -coef[:, None] * cache.probs
    dlogits[np.arange(len(coef)), cache.targets] += coef
    grads = {
        "W_out": dlogits.T @ cache.h2,
        "b_out": dlogits.sum(axis=0),
    }
    dz2 = (dlogits @ params.W_out) * (1.0 - cache.h2 ** 2)
    grads["W2"] = dz2.T @ cache.h1
    grads["b2"] = dz2.sum(axis=0)
    dz1 = (dz2 @ params.W2) * (1.0 - cache.h1 ** 2)
    grads["W1"] = dz1.T @ cache.x
    grads["b1"] = dz1.sum(axis=0)
    dx = dz1 @ params.W1
    demb = np.zeros_like(params.embedding)
    np.add.at(demb, cache.prev, dx[:, :EMBED_DIM])
    grads["embedding"] = demb
    return grads


# --------------------------------------------------------------------------
# Sequence-level helpers
# --------------------------------------------------------------------------

@dataclass
class Rollout:
    tokens: tuple[int, ...]
    per_step_logprobs: np.ndarray
    features: np.ndarray = field(repr=False)

    @property
    def logprob(self) -> float:
        return float(np.sum(self.per_step_logprobs))


@dataclass
class SequenceBatch:
    """Flattened teacher-forcing view of several token sequences."""

    feats: np.ndarray
    prev: np.ndarray
    pos: np.ndarray
    targets: np.ndarray
    bias: np.ndarray
    offsets: np.ndarray  # row offsets, len = num_sequences + 1

    def split(self, rows: np.ndarray) -> list[np.ndarray]:
        return [rows[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.offsets) - 1)]


def build_batch(features: Sequence[np.ndarray], sequences: Sequence[Sequence[int]], masking: bool) -> SequenceBatch:
    feats, prev, pos, targets, bias = [], [], [], [], []
    offsets = [0]
    for f, seq in zip(features, sequences):
        if len(seq) > MAX_LEN:
            raise ValueError(f"sequence longer than {MAX_LEN}")
        n = len(seq)
        feats.append(np.broadcast_to(f, (n, FEATURE_DIM)))
        prev.append(np.array((BOS, *seq[:-1]), dtype=np.int64)[:n])
        pos.append(np.arange(n))
        targets.append(np.asarray(seq, dtype=np.int64))
        bias.append(mask_bias(_sequence_allowed(seq), masking))
        offsets.append(offsets[-1] + n)
    return SequenceBatch(
        feats=np.concatenate(feats) if feats else np.zeros((0, FEATURE_DIM)),
        prev=np.concatenate(prev) if prev else np.zeros(0, dtype=np.int64),
        pos=np.concatenate(pos) if pos else np.zeros(0, dtype=np.int64),
        targets=np.concatenate(targets) if targets else np.zeros(0, dtype=np.int64),
        bias=np.concatenate(bias) if bias else np.zeros((0, VOCAB_SIZE)),
        offsets=np.array(offsets),
    )


def score_batch(params: PolicyParams, batch: SequenceBatch) -> ForwardCache:
    return score_rows(params, batch.feats, batch.prev, batch.pos, batch.bias, batch.targets)


def step_logits(params: PolicyParams, features: np.ndarray, prefix: Sequence[int], position: int,
                masking: bool = True) -> np.ndarray:
    """Logits for the token at ``position`` given ``prefix`` (``prefix[:position]`` is used)."""
    if not 0 <= position < MAX_LEN:
        raise ValueError(f"position must be in [0, {MAX_LEN})")
    prefix = tuple(prefix)[:position]
    state = START
    for tok in prefix:
        state = step_state(state, tok)
    allowed = allowed_tokens(state, MAX_LEN - position)
    prev = np.array([prefix[-1] if prefix else BOS])
    bias = mask_bias(allowed[None, :], masking)
    _, _, _, logits = forward_rows(params, np.asarray(features)[None, :], prev, np.array([position]), bias)
    return logits[0]


def sequence_logprob(params: PolicyParams, task: ChartTask | np.ndarray, tokens: Sequence[int],
                     masking: bool = True) -> tuple[float, np.ndarray]:
    """Teacher-forced total and per-step log-probabilities.

    A token that is structurally masked at its position scores -inf.
    """
    feats = featurize(task) if isinstance(task, ChartTask) else np.asarray(task)
    if not tokens:
        return 0.0, np.zeros(0)
    cache = score_batch(params, build_batch([feats], [tokens], masking))
    return float(np.sum(cache.logp)), cache.logp


def backward(params: PolicyParams, task: ChartTask | np.ndarray, tokens: Sequence[int],
             per_token_loss_grads: Sequence[float], masking: bool = True) -> dict[str, np.ndarray]:
    """Gradients of ``sum_t per_token_loss_grads[t] * log pi(tokens[t])``."""
    feats = featurize(task) if isinstance(task, ChartTask) else np.asarray(task)
    coef = np.asarray(per_token_loss_grads, dtype=float)
    if coef.shape != (len(tokens),):
        raise ValueError("one gradient coefficient per token is required")
    if not tokens:
        return zero_grads(params)
    cache = score_batch(params, build_batch([feats], [tokens], masking))
    return backward_rows(params, cache, coef)


def zero_grads(params: PolicyParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors().items()}


def sample_batch(params: PolicyParams, features: Sequence[np.ndarray], rng: np.random.Generator | None,
                 masking: bool = True, greedy: bool = False) -> list[Rollout]:
    """Sample one response per feature vector until EOS or ``MAX_LEN`` tokens.

    ``greedy`` decodes by argmax and ignores ``rng``. Uniform draws are taken
    for every still-active sequence in index order, so results depend only on
    the generator state.
    """
    B = len(features)
    feats = np.asarray(features, dtype=float).reshape(B, FEATURE_DIM)
    tokens: list[list[int]] = [[] for _ in range(B)]
    logps: list[list[float]] = [[] for _ in range(B)]
    states = [START] * B
    active = list(range(B))
    for t in range(MAX_LEN):
        if not active:
            break
        idx = np.array(active)
        allowed = np.stack([allowed_tokens(states[i], MAX_LEN - t) for i in active])
        prev = np.array([tokens[i][-1] if t else BOS for i in active])
        _, _, _, logits = forward_rows(params, feats[idx], prev, np.full(len(active), t),
                                       mask_bias(allowed, masking))
        lsm = log_softmax(logits)
        if greedy:
            choice = np.argmax(lsm, axis=1)
        else:
            probs = np.exp(lsm)
            cdf = np.cumsum(probs, axis=1)
            # u in (0, total]: the first index with cdf >= u has nonzero mass
            u = (1.0 - rng.random(len(active))) * cdf[:, -1]
            choice = (cdf < u[:, None]).sum(axis=1)
        still = []
        for r, i in enumerate(active):
            tok = int(choice[r])
            tokens[i].append(tok)
            logps[i].append(float(lsm[r, tok]))
            states[i] = step_state(states[i], tok) if states[i] != BROKEN else BROKEN
            if tok != Tok.EOS:
                still.append(i)
        active = still
    return [Rollout(tuple(tokens[i]), np.array(logps[i]), feats[i]) for i in range(B)]


def sample_response(params: PolicyParams, task: ChartTask, rng_state: np.random.Generator | None,
                    masking: bool = True, greedy: bool = False) -> Rollout:
    return sample_batch(params, [featurize(task)], rng_state, masking=masking, greedy=greedy)[0]


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: PolicyParams) -> "AdamState":
        return cls(0, zero_grads(params), zero_grads(params))


def apply_update(params: PolicyParams, grads: dict[str, np.ndarray], state: AdamState,
                 lr: float) -> tuple[PolicyParams, AdamState]:
    """One Adam step (descending ``grads``); returns new params and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise UpdateRejected(f"{bad} non-finite entries in gradient of {name}")
    t = state.step + 1
    new = {}
    m_new, v_new = {}, {}
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name in PARAM_NAMES:
        g = grads[name]
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_new[name], v_new[name] = m, v
        p = getattr(params, name)
        new[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS) if lr else p.copy()
    return PolicyParams(**new, version=params.version), AdamState(t, m_new, v_new)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def _arrays(d: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in d.items()}


def _unarrays(d: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d.items()}


def save_checkpoint(path: str | Path, params: PolicyParams, optimizer: AdamState | None = None,
                    extra: dict | None = None) -> None:
    """Versioned JSON checkpoint; float lists round-trip exactly."""
    doc = {
        "format": "chartrl-checkpoint",
        "version": params.version,
        "vocabulary": vocabulary_manifest(),
        "params": _arrays(params.tensors()),
        "optimizer": None if optimizer is None else {
            "step": optimizer.step, "m": _arrays(optimizer.m), "v": _arrays(optimizer.v),
        },
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc))


class VocabularyMismatch(ValueError):
    pass


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, AdamState | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "chartrl-checkpoint":
        raise ValueError(f"{path} is not a chartrl checkpoint")
    if doc["vocabulary"] != vocabulary_manifest():
        raise VocabularyMismatch(f"{path} was written with a different token vocabulary")
    tensors = _unarrays(doc["params"])
    expected = param_shapes()
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ValueError(f"{name} has shape {tensors[name].shape}, expected {shape}")
    params = PolicyParams(**tensors, version=doc["version"])
    opt = doc.get("optimizer")
    state = None if opt is None else AdamState(opt["step"], _unarrays(opt["m"]), _unarrays(opt["v"]))
    return params, state, doc.get("extra", {})
