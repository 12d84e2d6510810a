"""Tiny fixed-window feedforward language models.

The policy reads the last ``window`` token ids (left-padded with BOS),
concatenates their embeddings, and maps them through one tanh hidden
layer to logits over the vocabulary. Sampling and scoring both accept
optional per-position token masks so a task can constrain responses to
its legal alphabet; masked distributions are renormalized, so the stored
log-probabilities are log-probabilities of the constrained policy.

All randomness flows through explicitly passed numpy generators; sampling
is a pure function of (params, prompt, rng stream).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    ContractViolation,
    Record,
    Tensor,
    gather_pairs,
    matmul,
    reshape,
    softmax_logprobs,
    take_rows,
    tanh,
)

# Additive logit penalty for illegal tokens. Large enough that exp()
# underflows to exactly 0.0 after max-subtraction, keeping masked
# renormalization exact in float64.
MASK_LOGIT = -1e9

PositionMasks = Sequence[Sequence[int]]


@dataclass(frozen=True)
class Vocab:
    """Token id layout: content ids first, then BOS, EOS, separator."""

    n_content: int = 10

    def __post_init__(self):
        if self.n_content < 1:
            raise ContractViolation("vocabulary needs at least one content token")

    @property
    def bos(self) -> int:
        return self.n_content

    @property
    def eos(self) -> int:
        return self.n_content + 1

    @property
    def sep(self) -> int:
        return self.n_content + 2

    @property
    def size(self) -> int:
        return self.n_content + 3

    def content_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_content))


_PARAM_FIELDS = ("embed", "w_hidden", "b_hidden", "w_out", "b_out")


class PolicyParams:
    """Dense parameter arrays for one policy network."""

    __slots__ = ("vocab", "window", "embed", "w_hidden", "b_hidden", "w_out", "b_out")

    def __init__(self, vocab: Vocab, window: int, embed, w_hidden, b_hidden, w_out, b_out):
        if window < 1:
            raise ContractViolation("context window must be at least 1")
        self.vocab = vocab
        self.window = int(window)
        self.embed = np.asarray(embed, dtype=np.float64)
        self.w_hidden = np.asarray(w_hidden, dtype=np.float64)
        self.b_hidden = np.asarray(b_hidden, dtype=np.float64)
        self.w_out = np.asarray(w_out, dtype=np.float64)
        self.b_out = np.asarray(b_out, dtype=np.float64)
        v, d = self.embed.shape
        h = self.b_hidden.shape[0]
        if v != vocab.size:
            raise ContractViolation("embedding row count must equal vocabulary size")
        if self.w_hidden.shape != (window * d, h):
            raise ContractViolation("hidden weight shape is inconsistent")
        if self.w_out.shape != (h, v) or self.b_out.shape != (v,):
            raise ContractViolation("output layer shape is inconsistent")

    @property
    def embed_dim(self) -> int:
        return self.embed.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.b_hidden.shape[0]

    @property
    def param_count(self) -> int:
        return sum(getattr(self, f).size for f in _PARAM_FIELDS)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in _PARAM_FIELDS])

    def set_vector(self, vec: np.ndarray) -> None:
        """Load a flat parameter vector in place."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.param_count,):
            raise ContractViolation("parameter vector has the wrong length")
        at = 0
        for f in _PARAM_FIELDS:
            arr = getattr(self, f)
            arr[...] = vec[at : at + arr.size].reshape(arr.shape)
            at += arr.size

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            self.vocab,
            self.window,
            self.embed.copy(),
            self.w_hidden.copy(),
            self.b_hidden.copy(),
            self.w_out.copy(),
            self.b_out.copy(),
        )

    @classmethod
    def from_vector(
        cls, vocab: Vocab, window: int, embed_dim: int, hidden_dim: int, vec: np.ndarray
    ) -> "PolicyParams":
        v = vocab.size
        shapes = [
            (v, embed_dim),
            (window * embed_dim, hidden_dim),
            (hidden_dim,),
            (hidden_dim, v),
            (v,),
        ]
        total = sum(int(np.prod(s)) for s in shapes)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (total,):
            raise ContractViolation("parameter vector has the wrong length")
        arrays = []
        at = 0
        for s in shapes:
            n = int(np.prod(s))
            arrays.append(vec[at : at + n].reshape(s).copy())
            at += n
        return cls(vocab, window, *arrays)


def init_params(
    vocab: Vocab,
    window: int,
    embed_dim: int,
    hidden_dim: int,
    seed: int,
    scale: float,
) -> PolicyParams:
    """Deterministic uniform initialization in [-scale, scale]."""
    if scale < 0.0:
        raise ContractViolation("init scale must be non-negative")
    rng = np.random.default_rng(seed)
    v = vocab.size
    count = v * embed_dim + window * embed_dim * hidden_dim + hidden_dim + hidden_dim * v + v
    vec = rng.uniform(-scale, scale, size=count)
    return PolicyParams.from_vector(vocab, window, embed_dim, hidden_dim, vec)


def pad_context(tokens: Sequence[int], window: int, bos: int) -> np.ndarray:
    """Last ``window`` ids of a sequence, left-padded with BOS."""
    tail = list(tokens)[-window:]
    return np.asarray([bos] * (window - len(tail)) + tail, dtype=np.int64)


def _check_ids(ids: np.ndarray, size: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= size):
        raise ContractViolation("token id out of vocabulary range")


def forward_logits(params: PolicyParams, context: Sequence[int]) -> np.ndarray:
    """Logits over the vocabulary for one padded context."""
    ctx = np.asarray(context, dtype=np.int64)
    if ctx.shape != (params.window,):
        raise ContractViolation("context length must equal the window size")
    _check_ids(ctx, params.vocab.size)
    x = params.embed[ctx].reshape(1, -1)
    hidden = np.tanh(x @ params.w_hidden + params.b_hidden)
    return (hidden @ params.w_out + params.b_out)[0]


def _forward_logits_rows(params: PolicyParams, contexts: np.ndarray) -> np.ndarray:
    """Row-wise logits for a batch of padded contexts, shape (n, V)."""
    _check_ids(contexts, params.vocab.size)
    n = contexts.shape[0]
    x = params.embed[contexts.reshape(-1)].reshape(n, params.window * params.embed_dim)
    hidden = np.tanh(x @ params.w_hidden + params.b_hidden)
    return hidden @ params.w_out + params.b_out


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    peak = np.max(x, axis=-1, keepdims=True)
    shifted = x - peak
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def mask_matrix(vocab_size: int, masks: PositionMasks | None, n_rows: int) -> np.ndarray:
    """Additive-logit mask rows: 0 for legal ids, MASK_LOGIT otherwise."""
    out = np.zeros((n_rows, vocab_size))
    if masks is None:
        return out
    if len(masks) < n_rows:
        raise ContractViolation("fewer mask rows than generated positions")
    out += MASK_LOGIT
    for i in range(n_rows):
        legal = np.asarray(tuple(masks[i]), dtype=np.int64)
        if legal.size == 0:
            raise ContractViolation("a position mask must allow at least one token")
        _check_ids(legal, vocab_size)
        out[i, legal] = 0.0
    return out


@dataclass(frozen=True)
class SampledResponse:
    """One sampled response: token ids and their stored log-probabilities."""

    tokens: tuple[int, ...]
    logprobs: np.ndarray

    def __post_init__(self):
        if len(self.tokens) != len(self.logprobs):
            raise ContractViolation("token and log-probability lengths differ")

    def __len__(self) -> int:
        return len(self.tokens)


def _sample_rows(lp_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    probs = np.exp(lp_rows)
    cums = np.cumsum(probs, axis=1)
    draws = rng.random(lp_rows.shape[0])
    idx = np.sum(cums < draws[:, None], axis=1)
    return np.minimum(idx, lp_rows.shape[1] - 1)


def sample_sequence(
    params: PolicyParams,
    prompt: Sequence[int],
    max_len: int,
    temperature: float,
    rng: np.random.Generator,
    position_masks: PositionMasks | None = None,
) -> SampledResponse:
    """Autoregressive categorical sampling; stops at EOS or max_len."""
    if max_len < 1:
        raise ContractViolation("max_len must be at least 1")
    if not temperature > 0.0:
        raise ContractViolation("temperature must be positive")
    vocab = params.vocab
    seq = list(prompt)
    budget = max_len if position_masks is None else min(max_len, len(position_masks))
    tokens: list[int] = []
    logprobs: list[float] = []
    for pos in range(budget):
        ctx = pad_context(seq, params.window, vocab.bos)
        logits = forward_logits(params, ctx) * (1.0 / temperature)
        if position_masks is not None:
            logits = logits + mask_matrix(vocab.size, [position_masks[pos]], 1)[0]
        lp = _log_softmax_rows(logits[None, :])
        tok = int(_sample_rows(lp, rng)[0])
        tokens.append(tok)
        logprobs.append(float(lp[0, tok]))
        seq.append(tok)
        if tok == vocab.eos:
            break
    return SampledResponse(tuple(tokens), np.asarray(logprobs))


def sample_group(
    params: PolicyParams,
    prompt: Sequence[int],
    n: int,
    temperature: float,
    rng: np.random.Generator,
    position_masks: PositionMasks | None = None,
    max_len: int = 64,
    collect_entropy: bool = False,
) -> tuple[list[SampledResponse], list[float]]:
    """Sample n responses to one prompt in lockstep from a single stream.

    Per-step draws happen for every row whether or not it already
    finished, so the stream consumption depends only on (prompt, n) and
    not on which rows stopped early. Returned entropies cover positions
    whose mask allows at least two tokens.
    """
    if n < 1:
        raise ContractViolation("group size must be at least 1")
    if not temperature > 0.0:
        raise ContractViolation("temperature must be positive")
    vocab = params.vocab
    contexts = np.tile(pad_context(prompt, params.window, vocab.bos), (n, 1))
    budget = max_len if position_masks is None else min(max_len, len(position_masks))
    tokens: list[list[int]] = [[] for _ in range(n)]
    logprobs: list[list[float]] = [[] for _ in range(n)]
    entropies: list[float] = []
    alive = np.ones(n, dtype=bool)
    for pos in range(budget):
        logits = _forward_logits_rows(params, contexts) * (1.0 / temperature)
        open_choice = True
        if position_masks is not None:
            row = mask_matrix(vocab.size, [position_masks[pos]], 1)[0]
            logits = logits + row
            open_choice = len(tuple(position_masks[pos])) >= 2
        lp = _log_softmax_rows(logits)
        picks = _sample_rows(lp, rng)
        if collect_entropy and open_choice:
            probs = np.exp(lp)
            entropies.extend((-np.sum(probs * lp, axis=1))[alive].tolist())
        for i in range(n):
            if not alive[i]:
                continue
            tok = int(picks[i])
            tokens[i].append(tok)
            logprobs[i].append(float(lp[i, tok]))
            if tok == vocab.eos:
                alive[i] = False
        contexts = np.concatenate([contexts[:, 1:], picks[:, None]], axis=1)
        if not alive.any():
            break
    responses = [
        SampledResponse(tuple(t), np.asarray(l)) for t, l in zip(tokens, logprobs)
    ]
    return responses, entropies


def response_contexts(
    prompt: Sequence[int], tokens: Sequence[int], window: int, bos: int
) -> np.ndarray:
    """Padded context rows for scoring each response position."""
    padded = [bos] * window + list(prompt) + list(tokens)
    m = len(prompt)
    return np.asarray(
        [padded[m + j : m + j + window] for j in range(len(tokens))], dtype=np.int64
    )


class PolicyLeaves:
    """Policy parameters registered as leaves on an autodiff record."""

    __slots__ = ("record", "embed", "w_hidden", "b_hidden", "w_out", "b_out", "window", "vocab")

    def __init__(self, record: Record, params: PolicyParams):
        self.record = record
        self.window = params.window
        self.vocab = params.vocab
        for f in _PARAM_FIELDS:
            setattr(self, f, record.leaf(getattr(params, f)))

    def gradient_vector(self, grads: dict[int, np.ndarray]) -> np.ndarray:
        parts = []
        for f in _PARAM_FIELDS:
            leaf = getattr(self, f)
            g = grads.get(leaf.node)
            parts.append(np.zeros(leaf.size) if g is None else g.ravel())
        return np.concatenate(parts)


def score_tokens_diff(
    leaves: PolicyLeaves,
    contexts: np.ndarray,
    targets: np.ndarray,
    masks: np.ndarray | None,
    temperature: float = 1.0,
) -> Tensor:
    """Differentiable log-probabilities of target tokens, shape (T,)."""
    n = contexts.shape[0]
    d = leaves.embed.shape[1]
    e = take_rows(leaves.embed, contexts.reshape(-1))
    x = reshape(e, (n, leaves.window * d))
    ones = np.ones((n, 1))
    b_h = reshape(leaves.b_hidden, (1, leaves.b_hidden.size))
    b_o = reshape(leaves.b_out, (1, leaves.b_out.size))
    hidden = tanh(matmul(x, leaves.w_hidden) + matmul(ones, b_h))
    logits = matmul(hidden, leaves.w_out) + matmul(ones, b_o)
    scaled = logits * (1.0 / temperature)
    if masks is not None:
        scaled = scaled + masks
    lp = softmax_logprobs(scaled, 1.0)
    return gather_pairs(lp, np.arange(n), targets)


def score_tokens(
    params: PolicyParams,
    contexts: np.ndarray,
    targets: np.ndarray,
    masks: np.ndarray | None,
    temperature: float = 1.0,
) -> np.ndarray:
    """Plain-numpy twin of :func:`score_tokens_diff`."""
    logits = _forward_logits_rows(params, contexts) * (1.0 / temperature)
    if masks is not None:
        logits = logits + masks
    lp = _log_softmax_rows(logits)
    return lp[np.arange(contexts.shape[0]), np.asarray(targets, dtype=np.int64)]


def sequence_logprobs(
    params: PolicyParams,
    prompt: Sequence[int],
    tokens: Sequence[int],
    position_masks: PositionMasks | None = None,
    temperature: float = 1.0,
) -> np.ndarray:
    """Per-token log-probabilities of a response under the current policy.

    Re-scoring a response with the parameters that sampled it reproduces
    the stored log-probabilities to within 1e-12.
    """
    if not temperature > 0.0:
        raise ContractViolation("temperature must be positive")
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.size == 0:
        return np.zeros(0)
    contexts = response_contexts(prompt, tokens, params.window, params.vocab.bos)
    masks = None
    if position_masks is not None:
        masks = mask_matrix(params.vocab.size, position_masks, toks.size)
    return score_tokens(params, contexts, toks, masks, temperature)


def mean_token_entropy(
    params: PolicyParams,
    items: Sequence[tuple[Sequence[int], Sequence[int], PositionMasks | None]],
    temperature: float = 1.0,
) -> float:
    """Mean next-token entropy over all open-choice response positions.

    ``items`` holds (prompt, tokens, position_masks) triples. Positions
    whose mask pins a single token are skipped; unmasked positions always
    count.
    """
    total = 0.0
    count = 0
    for prompt, tokens, position_masks in items:
        toks = np.asarray(tokens, dtype=np.int64)
        if toks.size == 0:
            continue
        contexts = response_contexts(prompt, tokens, params.window, params.vocab.bos)
        logits = _forward_logits_rows(params, contexts) * (1.0 / temperature)
        masks = None
        if position_masks is not None:
            masks = mask_matrix(params.vocab.size, position_masks, toks.size)
            logits = logits + masks
        lp = _log_softmax_rows(logits)
        probs = np.exp(lp)
        h = -np.sum(probs * lp, axis=1)
        for j in range(toks.size):
            if position_masks is not None and len(tuple(position_masks[j])) < 2:
                continue
            total += h[j]
            count += 1
    if count == 0:
        raise ContractViolation("no open-choice positions to average over")
    return total / count
