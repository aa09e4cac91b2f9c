"""Comparison methods: SFT, GRPO, SFT-then-RL, static mixture, and HAPO itself.

The static mixture reuses the injection machinery with the gate forced open,
so HAPO and the static mixture differ only in the gate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .env import TaskSpec, Trajectory, non_teacher_solutions
from .exceptions import ConfigError
from .gating import GateConfig, gate_and_inject
from .grpo import DEFAULT_EPS_CLIP, Group, TokenBatch, compute_advantages, score_rows, token_logps
from .hapo import BatchStats, ShapingConfig, hapo_batch_objective
from .policy import PolicyParams, SparseGrad, sequence_logp

METHODS = ("sft", "grpo", "sft_then_rl", "static_mix", "hapo")


@dataclass(frozen=True)
class BaselineConfig:
    """Which objective drives training.

    ``lambda_mix`` weights the teacher branch of the static mixture and
    ``use_shaping`` chooses a shaped or a plain
    teacher likelihood. ``switch_step`` is the SFT-to-RL switch.
    """

    method: str = "hapo"
    switch_step: int = 0
    use_shaping: bool = True
    lambda_mix: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.switch_step < 0:
            raise ConfigError("switch_step must be >= 0")
        if not self.lambda_mix > 0:
            raise ConfigError("lambda_mix must be positive")

    def phase(self, step: int) -> str:
        if self.method == "sft" or (self.method == "sft_then_rl" and step < self.switch_step):
            return "sft"
        return "rl"

    def gate_for(self, gate: GateConfig) -> GateConfig:
        if self.method == "hapo":
            return gate
        if self.method == "static_mix":
            return replace(gate, mode="always", posterior_sampling=False)
        return replace(gate, mode="never", posterior_sampling=False)

    def shaping_for(self, shaping: ShapingConfig) -> ShapingConfig:
        if self.method == "static_mix" and not self.use_shaping:
            return replace(shaping, plain=True)
        return shaping

    @property
    def teacher_weight(self) -> float:
        return self.lambda_mix if self.method == "static_mix" else 1.0


def sft_objective(params: PolicyParams, demos: Sequence[Trajectory]) -> tuple[float, SparseGrad]:
    """Mean per-token log-likelihood of the demonstrations."""
    if not demos:
        raise ValueError("sft_objective needs at least one demonstration")
    batch = TokenBatch.build(params, demos)
    lp, probs = token_logps(params, batch)
    n = len(batch)
    return float(lp.sum()) / n, score_rows(batch, probs, np.ones(n)) / n


def static_mix_step(
    params: PolicyParams,
    old_params: PolicyParams | None,
    groups: Sequence[Group],
    task: TaskSpec,
    config: BaselineConfig,
    gate: GateConfig = GateConfig(),
    shaping: ShapingConfig = ShapingConfig(),
    eps_clip: float = DEFAULT_EPS_CLIP,
    step: int = 0,
    eps_std: float = 1e-8,
    ddof: int = 0,
) -> tuple[float, SparseGrad, BatchStats]:
    """Inject the teacher into every group and evaluate the mixed objective."""
    forced = replace(gate, mode="always", posterior_sampling=False)
    injected, _ = gate_and_inject(groups, task, forced, step)
    injected = [compute_advantages(g, eps_std, ddof) for g in injected]
    shaping = shaping if config.use_shaping else replace(shaping, plain=True)
    return hapo_batch_objective(params, old_params, injected, shaping, eps_clip, teacher_weight=config.lambda_mix)


def solution_probabilities(params: PolicyParams, task: TaskSpec, prompt: int, temperature: float = 1.0) -> dict:
    """Exact probability of every accepted sequence of ``prompt``."""
    return {s: float(np.exp(sequence_logp(params, prompt, s, temperature))) for s in sorted(task.accepted[prompt])}


def non_teacher_probability(params: PolicyParams, task: TaskSpec) -> float:
    """Mean over prompts of the exact probability mass on accepted non-teacher answers."""
    vals = []
    for p in task.prompts:
        vals.append(sum(np.exp(sequence_logp(params, p, s)) for s in non_teacher_solutions(task, p)))
    return float(np.mean(vals))


def teacher_probability(params: PolicyParams, task: TaskSpec) -> float:
    return float(np.mean([np.exp(sequence_logp(params, p, task.teacher_demos[p])) for p in task.prompts]))


def run_method(config: BaselineConfig, task: TaskSpec, train_config, **kwargs):
    """Train with the selected method; returns the run's RunMetrics."""
    from .trainer import train

    return train(task, train_config, config, **kwargs)
