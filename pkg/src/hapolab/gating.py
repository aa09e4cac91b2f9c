"""Beta-Binomial confidence gate and synthetic success injection.

A group's confidence is the posterior mean of its success rate under a Beta
prior. When it falls strictly below the current threshold, the worst
trajectory of the group is swapped for the prompt's teacher demonstration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .env import TaskSpec, Trajectory, teacher_demo
from .exceptions import ConfigError
from .grpo import Group

DEFAULT_GAMMA = 0.8
DEFAULT_GROUP_SIZE = 8


@dataclass(frozen=True)
class Constant:
    gamma: float = DEFAULT_GAMMA

    def values(self):
        return (self.gamma,)


@dataclass(frozen=True)
class Step:
    gamma0: float
    gamma1: float
    switch_step: int

    def values(self):
        return (self.gamma0, self.gamma1)


@dataclass(frozen=True)
class Sigmoid:
    gamma_min: float
    gamma_max: float
    midpoint: float
    slope: float

    def values(self):
        return (self.gamma_min, self.gamma_max)


Schedule = Constant | Step | Sigmoid


@dataclass(frozen=True)
class GateConfig:
    """Threshold schedule plus the gate's ablation switches.

    ``mode`` is ``"gated"`` (the confidence rule), ``"never"`` (pure RL) or
    ``"always"`` (unconditional injection, i.e. a static mixture).
    ``posterior_sampling`` compares a Beta posterior draw instead of the
    posterior mean. ``tie_break`` picks among equally bad trajectories:
    ``"lowest"`` index or ``"longest_failed"``.
    """

    schedule: Schedule = field(default_factory=Constant)
    mode: str = "gated"
    prior: tuple[float, float] = (1.0, 1.0)
    posterior_sampling: bool = False
    tie_break: str = "lowest"

    def __post_init__(self):
        for g in self.schedule.values():
            if not 0.0 < g < 1.0:
                raise ConfigError(f"threshold values must lie in (0, 1), got {g}")
        if isinstance(self.schedule, Sigmoid) and self.schedule.slope <= 0:
            raise ConfigError("sigmoid slope must be positive")
        if isinstance(self.schedule, Step) and self.schedule.switch_step < 0:
            raise ConfigError("switch_step must be >= 0")
        if self.mode not in ("gated", "never", "always"):
            raise ConfigError(f"unknown gate mode {self.mode!r}")
        if self.tie_break not in ("lowest", "longest_failed"):
            raise ConfigError(f"unknown tie_break {self.tie_break!r}")
        if min(self.prior) <= 0:
            raise ConfigError("Beta prior parameters must be positive")


@dataclass(frozen=True)
class GateDecision:
    confidence: float
    threshold: float
    opened: bool
    replaced_index: int | None = None
    success_count: int = 0
    group_id: int = 0


def confidence(successes: int, n: int, prior: tuple[float, float] = (1.0, 1.0)) -> float:
    """Posterior mean (a + S) / (a + b + N); (1 + S) / (2 + N) for the flat prior."""
    if n < 0 or not 0 <= successes <= n:
        raise ValueError(f"success count {successes} outside [0, {n}]")
    a, b = prior
    return (a + successes) / (a + b + n)


def threshold_at(config: GateConfig | Schedule, step: int) -> float:
    sched = config.schedule if isinstance(config, GateConfig) else config
    if step < 0:
        raise ValueError("step must be >= 0")
    if isinstance(sched, Constant):
        return sched.gamma
    if isinstance(sched, Step):
        return sched.gamma0 if step < sched.switch_step else sched.gamma1
    if isinstance(sched, Sigmoid):
        z = (step - sched.midpoint) / sched.slope
        return sched.gamma_min + (sched.gamma_max - sched.gamma_min) / (1.0 + math.exp(-z))
    raise ConfigError(f"unknown schedule {sched!r}")


def gate_opens(successes: int, n: int, gamma: float, prior=(1.0, 1.0)) -> bool:
    return confidence(successes, n, prior) < gamma


def worst_index(group: Group, tie_break: str = "lowest") -> int:
    rewards = group.rewards
    worst = np.flatnonzero(rewards == rewards.min())
    if tie_break == "longest_failed":
        lengths = np.array([len(group.trajectories[j]) for j in worst])
        return int(worst[np.argmax(lengths)])
    return int(worst[0])


def ssi_transform(group: Group, teacher: Trajectory, tie_break: str = "lowest") -> Group:
    """Replace the lowest-reward trajectory with the teacher demonstration."""
    if not teacher.is_teacher:
        raise ValueError("injected trajectory must be flagged is_teacher")
    if teacher.prompt != group.prompt:
        raise ValueError(f"teacher for prompt {teacher.prompt} injected into group of prompt {group.prompt}")
    if group.injected:
        raise ValueError("group already injected")
    j = worst_index(group, tie_break)
    trajs = list(group.trajectories)
    replaced = trajs[j]
    trajs[j] = teacher
    out = replace(group, trajectories=trajs, injected=True, replaced=replaced, advantages=None)
    if isinstance(group.decision, GateDecision):
        out.decision = replace(group.decision, replaced_index=j)
    return out


def gate_and_inject(
    groups: Sequence[Group],
    task: TaskSpec,
    config: GateConfig,
    step: int,
    rng: np.random.Generator | None = None,
) -> tuple[list[Group], list[float]]:
    """Score every group and inject the teacher where confidence is below threshold.

    Confidence is computed from the group as sampled; the returned groups
    carry it in ``confidence`` and the decision in ``decision``.
    """
    gamma = threshold_at(config, step)
    if config.posterior_sampling and rng is None:
        raise ConfigError("posterior_sampling needs an rng")
    out, confs = [], []
    for g in groups:
        c = confidence(g.success_count, g.size, config.prior)
        if config.mode == "never":
            opened = False
        elif config.mode == "always":
            opened = True
        elif config.posterior_sampling:
            a, b = config.prior
            opened = bool(rng.beta(a + g.success_count, b + g.size - g.success_count) < gamma)
        else:
            opened = c < gamma
        scored = replace(g, confidence=c,
                         decision=GateDecision(c, gamma, opened, None, g.success_count, g.group_id))
        if opened:
            scored = ssi_transform(scored, teacher_demo(task, g.prompt), config.tie_break)
        out.append(scored)
        confs.append(c)
    return out, confs


def gate_threshold_count(n: int, gamma: float) -> float:
    """k_gamma = gamma (2 + N) - 1: the gate opens iff S < k_gamma (flat prior)."""
    return gamma * (2 + n) - 1


def hoeffding_bound(n: int, mu: float, gamma: float) -> float:
    """exp(-2 N (mu - gamma)^2), the stated envelope on P(gate opens)."""
    return math.exp(-2.0 * n * (mu - gamma) ** 2)


def exact_open_probability(
    n: int,
    mu: float,
    gamma: float,
    prior=(1.0, 1.0),
    confidence_fn: Callable[[int, int], float] | None = None,
) -> float:
    """P(gate opens) for S ~ Binomial(N, mu), summing the pmf over opening counts.

    ``confidence_fn(S, N)`` replaces the Beta-posterior confidence when given.
    """
    total = 0.0
    for s in range(n + 1):
        c = confidence(s, n, prior) if confidence_fn is None else confidence_fn(s, n)
        if c < gamma:
            total += math.comb(n, s) * mu**s * (1.0 - mu) ** (n - s)
    return min(total, 1.0)
