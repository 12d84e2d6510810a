"""Clipped-surrogate objectives with static and signal-aware trust regions.

The elastic band is symmetric, (1 - eps_t, 1 + eps_t), yet behaves
sign-dependently on its own: for a positive-advantage token only the
upper bound can bind and for a negative-advantage token only the lower
bound can, so widening eps_t for positive advantages and narrowing it for
negative ones needs no asymmetric bookkeeping.

The dynamic threshold composes a base half-width with a micro term driven
by the token's advantage, ``lam1 * tanh(A)``, and a macro term driven by
group difficulty, ``lam2 * 4 * p * (1 - p)``, which peaks at pass rate
one half and vanishes for saturated or hopeless groups.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import policy as policy_mod
from . import tasks as tasks_mod
from .autodiff import (
    ContractViolation,
    Record,
    Tensor,
    clip_gated,
    exp,
    min_pair,
    sum_all,
)
from .groups import RolloutGroup, group_stats, DEFAULT_XI
from .policy import PolicyLeaves, PolicyParams, mask_matrix, response_contexts

DIRECTIONS = ("standard", "inverse", "micro-only", "macro-only")


@dataclass(frozen=True)
class Static:
    """Fixed symmetric clipping band of half-width epsilon."""

    epsilon: float

    def __post_init__(self):
        if self.epsilon < 0.0:
            raise ContractViolation("epsilon must be non-negative")


@dataclass(frozen=True)
class ClipHigh:
    """Decoupled band: lower half-width epsilon_low, upper epsilon_high."""

    epsilon_low: float
    epsilon_high: float

    def __post_init__(self):
        if self.epsilon_low < 0.0 or self.epsilon_high < 0.0:
            raise ContractViolation("clip half-widths must be non-negative")


@dataclass(frozen=True)
class Elastic:
    """Signal-aware band; half-width depends on advantage and pass rate."""

    epsilon_base: float
    lambda1: float
    lambda2: float
    direction: str = "standard"

    def __post_init__(self):
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise ContractViolation("lambda terms must be non-negative")
        if not self.epsilon_base - self.lambda1 > 0.0:
            raise ContractViolation(
                "band inversion: epsilon_base - lambda1 must stay positive"
            )
        if self.direction not in DIRECTIONS:
            raise ContractViolation(f"unknown direction {self.direction!r}")


ClipStrategy = Union[Static, ClipHigh, Elastic]


def micro_adjustment(advantage, lambda1: float, direction: str = "standard"):
    """Advantage-driven half-width shift, saturating at +-lambda1."""
    if direction not in DIRECTIONS:
        raise ContractViolation(f"unknown direction {direction!r}")
    if direction == "macro-only":
        return np.zeros_like(np.asarray(advantage, dtype=np.float64))
    sign = -1.0 if direction == "inverse" else 1.0
    return sign * lambda1 * np.tanh(np.asarray(advantage, dtype=np.float64))


def macro_adjustment(pass_rate, lambda2: float, direction: str = "standard"):
    """Difficulty-driven half-width bonus, maximal at pass rate 0.5."""
    if direction not in DIRECTIONS:
        raise ContractViolation(f"unknown direction {direction!r}")
    p = np.asarray(pass_rate, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ContractViolation("pass rate must lie in [0, 1]")
    if direction == "micro-only":
        return np.zeros_like(p)
    return lambda2 * 4.0 * p * (1.0 - p)


def dynamic_epsilon(advantage, pass_rate, strategy: Elastic):
    """Elastic half-width; bounded by [base - lam1, base + lam1 + lam2]."""
    return (
        strategy.epsilon_base
        + micro_adjustment(advantage, strategy.lambda1, strategy.direction)
        + macro_adjustment(pass_rate, strategy.lambda2, strategy.direction)
    )


def clip_bounds(strategy: ClipStrategy, advantage, pass_rate):
    """Ratio bounds (lo, hi) for a token under the given strategy."""
    if isinstance(strategy, Static):
        eps = np.broadcast_to(
            np.float64(strategy.epsilon), np.asarray(advantage, dtype=np.float64).shape
        )
        return 1.0 - eps, 1.0 + eps
    if isinstance(strategy, ClipHigh):
        shape = np.asarray(advantage, dtype=np.float64).shape
        return (
            1.0 - np.broadcast_to(np.float64(strategy.epsilon_low), shape),
            1.0 + np.broadcast_to(np.float64(strategy.epsilon_high), shape),
        )
    eps = dynamic_epsilon(advantage, pass_rate, strategy)
    return 1.0 - eps, 1.0 + eps


def token_surrogate(ratio: Tensor, advantage, lo, hi) -> tuple[Tensor, np.ndarray]:
    """min(ratio*A, clip(ratio)*A) per token, plus the clipped-token mask.

    A token counts as clipped only when the clipped branch is strictly
    smaller, so first-pass evaluations (ratio exactly one) report zero.
    """
    adv = np.asarray(advantage, dtype=np.float64)
    clipped = clip_gated(ratio, lo, hi)
    unclipped_branch = ratio * adv
    clipped_branch = clipped * adv
    surrogate = min_pair(unclipped_branch, clipped_branch)
    mask = clipped_branch.data < unclipped_branch.data
    return surrogate, mask


def kl_to_reference(logp_theta: Tensor, logp_ref: np.ndarray) -> Tensor:
    """Mean per-token KL estimate u - log(u) - 1 with u = exp(ref - theta).

    Non-negative for every u > 0 and zero only at u = 1; the gradient
    flows to logp_theta only.
    """
    ref = np.asarray(logp_ref, dtype=np.float64)
    diff = ref - logp_theta
    u = exp(diff)
    per_token = u - diff - 1.0
    return per_token.mean()


def theoretical_epsilon(rho: float, epsilon_base: float) -> float:
    """Band half-width implied by a target-weighted KL budget: base * sqrt(rho)."""
    if not rho >= 1.0:
        raise ContractViolation("rho must be at least 1")
    if epsilon_base < 0.0:
        raise ContractViolation("epsilon_base must be non-negative")
    return epsilon_base * float(np.sqrt(rho))


def kl_quadratic_residual(ratio: float) -> float:
    """|(-log r) - (-(r - 1) + (r - 1)^2 / 2)| for a single ratio r > 0."""
    if not ratio > 0.0:
        raise ContractViolation("ratio must be positive")
    r = float(ratio)
    return abs(-np.log(r) - (-(r - 1.0) + 0.5 * (r - 1.0) ** 2))


def kl_cubic_bound(ratio: float) -> float:
    """Lagrange bound on the quadratic residual: |r-1|^3 / (3 min(r,1)^3)."""
    if not ratio > 0.0:
        raise ContractViolation("ratio must be positive")
    r = float(ratio)
    return abs(r - 1.0) ** 3 / (3.0 * min(r, 1.0) ** 3)


@dataclass
class LossBreakdown:
    """Objective value split into its parts, plus clipping diagnostics.

    ``total`` is the maximized objective; the trainer negates it. The
    identity total = surrogate - kl_coef * kl holds by construction.
    """

    surrogate: float
    kl: float
    total: float
    clipped_tokens: int
    total_tokens: int
    mean_epsilon: float | None = None
    epsilon_trace: np.ndarray | None = None
    gradient: np.ndarray | None = None

    @property
    def clip_fraction(self) -> float:
        if self.total_tokens == 0:
            return 0.0
        return self.clipped_tokens / self.total_tokens


@dataclass
class PreparedBatch:
    """Constant per-token arrays shared by every inner-epoch evaluation."""

    contexts: np.ndarray
    targets: np.ndarray
    masks: np.ndarray
    old_logprobs: np.ndarray
    ref_logprobs: np.ndarray
    advantages: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    weights: np.ndarray
    epsilon_trace: np.ndarray | None
    group_slices: list[tuple[int, int]]
    temperature: float


def prepare_batch(
    batch: Sequence[RolloutGroup],
    strategy: ClipStrategy,
    ref_params: PolicyParams,
    xi: float = DEFAULT_XI,
    temperature: float = 1.0,
) -> PreparedBatch:
    """Flatten a batch of groups into per-token constants for the objective."""
    if len(batch) == 0:
        raise ContractViolation("batch must contain at least one group")
    vocab = ref_params.vocab
    ctx_parts, tgt_parts, mask_parts = [], [], []
    old_parts, adv_parts, lo_parts, hi_parts, w_parts = [], [], [], [], []
    eps_parts: list[np.ndarray] = []
    group_slices = []
    at = 0
    n_groups = len(batch)
    for group in batch:
        stats = group_stats(group.rewards, xi)
        grammar = tasks_mod.response_grammar(group.prompt, vocab)
        start = at
        for resp, adv in zip(group.responses, stats.advantages):
            toks = np.asarray(resp.tokens, dtype=np.int64)
            length = toks.size
            if length == 0:
                raise ContractViolation("cannot score an empty response")
            ctx_parts.append(
                response_contexts(group.prompt.tokens, resp.tokens, ref_params.window, vocab.bos)
            )
            tgt_parts.append(toks)
            mask_parts.append(mask_matrix(vocab.size, grammar, length))
            old_parts.append(np.asarray(resp.logprobs, dtype=np.float64))
            adv_parts.append(np.full(length, adv))
            lo_i, hi_i = clip_bounds(strategy, adv, stats.pass_rate)
            lo_parts.append(np.full(length, lo_i))
            hi_parts.append(np.full(length, hi_i))
            if isinstance(strategy, Elastic):
                eps_parts.append(
                    np.full(length, dynamic_epsilon(adv, stats.pass_rate, strategy))
                )
            w_parts.append(np.full(length, 1.0 / (n_groups * group.size * length)))
            at += length
        group_slices.append((start, at))
    contexts = np.concatenate(ctx_parts, axis=0)
    targets = np.concatenate(tgt_parts)
    masks = np.concatenate(mask_parts, axis=0)
    ref_lp = policy_mod.score_tokens(ref_params, contexts, targets, masks, temperature)
    return PreparedBatch(
        contexts=contexts,
        targets=targets,
        masks=masks,
        old_logprobs=np.concatenate(old_parts),
        ref_logprobs=ref_lp,
        advantages=np.concatenate(adv_parts),
        lo=np.concatenate(lo_parts),
        hi=np.concatenate(hi_parts),
        weights=np.concatenate(w_parts),
        epsilon_trace=np.concatenate(eps_parts) if eps_parts else None,
        group_slices=group_slices,
        temperature=temperature,
    )


def evaluate_prepared(
    prep: PreparedBatch,
    params: PolicyParams,
    kl_coef: float,
    with_grad: bool = False,
) -> LossBreakdown:
    """Evaluate the clipped surrogate minus the KL penalty on a tape."""
    if kl_coef < 0.0:
        raise ContractViolation("kl_coef must be non-negative")
    record = Record()
    leaves = PolicyLeaves(record, params)
    lp = policy_mod.score_tokens_diff(
        leaves, prep.contexts, prep.targets, prep.masks, prep.temperature
    )
    ratio = exp(lp - prep.old_logprobs)
    surrogate_tokens, clip_mask = token_surrogate(ratio, prep.advantages, prep.lo, prep.hi)
    surrogate = sum_all(surrogate_tokens * prep.weights)
    diff = prep.ref_logprobs - lp
    kl_tokens = exp(diff) - diff - 1.0
    kl = sum_all(kl_tokens * prep.weights)
    total = surrogate - kl_coef * kl
    gradient = None
    if with_grad:
        gradient = leaves.gradient_vector(record.backward(total))
    trace = prep.epsilon_trace
    return LossBreakdown(
        surrogate=surrogate.item(),
        kl=kl.item(),
        total=total.item(),
        clipped_tokens=int(np.sum(clip_mask)),
        total_tokens=int(prep.targets.size),
        mean_epsilon=None if trace is None else float(np.mean(trace)),
        epsilon_trace=trace,
        gradient=gradient,
    )


def batch_objective(
    batch: Sequence[RolloutGroup],
    strategy: ClipStrategy,
    kl_coef: float,
    params: PolicyParams,
    ref_params: PolicyParams,
    xi: float = DEFAULT_XI,
    temperature: float = 1.0,
    with_grad: bool = False,
) -> LossBreakdown:
    """Group-averaged, token-mean clipped surrogate with a KL penalty.

    Responses are weighted 1 / (groups * G * length) per token, so the
    result is the mean over groups of the mean over responses of the
    token-mean objective.
    """
    prep = prepare_batch(batch, strategy, ref_params, xi, temperature)
    return evaluate_prepared(prep, params, kl_coef, with_grad)


@dataclass(frozen=True)
class StaticMismatchReport:
    """How often ideal update sizes overflow one static band."""

    total_tokens: int
    flagged_tokens: int
    group_variances: tuple[float, ...]
    variance_spread: float

    @property
    def flagged_fraction(self) -> float:
        if self.total_tokens == 0:
            return 0.0
        return self.flagged_tokens / self.total_tokens


def static_mismatch_report(
    batch: Sequence[RolloutGroup],
    epsilon_static: float,
    beta: float = 1.0,
    xi: float = DEFAULT_XI,
) -> StaticMismatchReport:
    """Count tokens whose ideal ratio step |A| / beta exceeds the band.

    The ideal per-token step away from ratio one scales linearly with the
    advantage over the KL coefficient; with the proportionality constant
    taken as one, a token is flagged when |A| / beta > epsilon_static.
    The per-group spread of pass-rate variance p * (1 - p) summarizes how
    far one static band must stretch across difficulty levels.
    """
    if epsilon_static < 0.0:
        raise ContractViolation("epsilon_static must be non-negative")
    if not beta > 0.0:
        raise ContractViolation("beta must be positive")
    if len(batch) == 0:
        raise ContractViolation("batch must contain at least one group")
    total = 0
    flagged = 0
    variances = []
    for group in batch:
        stats = group_stats(group.rewards, xi)
        p = stats.pass_rate
        variances.append(p * (1.0 - p))
        for resp, adv in zip(group.responses, stats.advantages):
            total += len(resp)
            if abs(adv) / beta > epsilon_static:
                flagged += len(resp)
    return StaticMismatchReport(
        total_tokens=total,
        flagged_tokens=flagged,
        group_variances=tuple(variances),
        variance_spread=float(max(variances) - min(variances)),
    )
