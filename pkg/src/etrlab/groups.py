"""Group-relative reward normalization.

Advantages are computed within a group of responses to one prompt: center
by the group mean, divide by the population standard deviation plus a
small stabilizer. Degenerate groups (all rewards equal) are kept and get
exactly zero advantages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ContractViolation
from .policy import SampledResponse
from .tasks import Prompt

DEFAULT_XI = 1e-6


@dataclass(frozen=True)
class RolloutGroup:
    """G responses to one prompt with their outcome rewards."""

    prompt: Prompt
    responses: tuple[SampledResponse, ...]
    rewards: np.ndarray = field(compare=False)

    def __post_init__(self):
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(self, "rewards", np.asarray(self.rewards, dtype=np.float64))
        if len(self.responses) < 2:
            raise ContractViolation("a rollout group needs at least two responses")
        if self.rewards.shape != (len(self.responses),):
            raise ContractViolation("one reward per response is required")
        if not np.all(np.isin(self.rewards, (-1.0, 1.0))):
            raise ContractViolation("rewards must be +1 or -1")

    @property
    def size(self) -> int:
        return len(self.responses)


@dataclass(frozen=True)
class GroupStats:
    mean_reward: float
    std_reward: float
    pass_rate: float
    advantages: np.ndarray


def pass_rate(rewards: np.ndarray) -> float:
    """Fraction of strictly positive rewards."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ContractViolation("pass rate of an empty group")
    return float(np.mean(rewards > 0.0))


def normalize_advantages(rewards: np.ndarray, xi: float = DEFAULT_XI) -> np.ndarray:
    """Center by group mean, scale by population std plus xi.

    The advantages sum to ~0 by construction; an all-equal group yields
    exactly zero advantages because the centered numerator is exact.
    """
    if not xi > 0.0:
        raise ContractViolation("xi must be positive")
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ContractViolation("advantage normalization needs at least two rewards")
    centered = rewards - np.mean(rewards)
    std = float(np.sqrt(np.mean(centered * centered)))
    return centered / (std + xi)


def group_stats(rewards: np.ndarray, xi: float = DEFAULT_XI) -> GroupStats:
    rewards = np.asarray(rewards, dtype=np.float64)
    advantages = normalize_advantages(rewards, xi)
    centered = rewards - np.mean(rewards)
    return GroupStats(
        mean_reward=float(np.mean(rewards)),
        std_reward=float(np.sqrt(np.mean(centered * centered))),
        pass_rate=pass_rate(rewards),
        advantages=advantages,
    )


def broadcast_advantage(
    stats: GroupStats, responses: Sequence[SampledResponse]
) -> list[np.ndarray]:
    """Repeat each response-level advantage across its tokens."""
    if len(responses) == 0:
        raise ContractViolation("cannot broadcast over zero responses")
    if len(responses) != stats.advantages.size:
        raise ContractViolation("one advantage per response is required")
    return [np.full(len(r), a) for r, a in zip(responses, stats.advantages)]
