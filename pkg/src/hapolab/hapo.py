"""HAPO batch objective: clipped surrogate on own samples, shaped likelihood on teacher tokens.

Every trajectory contributes a token-summed loss; the batch total is divided
once by the number of tokens in the batch. Teacher tokens are scored under
the current policy with the shaping function f(p) = p / (p + beta), scaled
by (1 - c) of the group's confidence when annealing is on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import Trajectory
from .exceptions import ConfigError, StateError
from .grpo import DEFAULT_EPS_CLIP, Group, TokenBatch, old_token_logps, on_policy_view, score_rows, surrogate_terms, token_logps
from .policy import PolicyParams, SparseGrad


@dataclass(frozen=True)
class ShapingConfig:
    beta: float = 0.1
    confidence_anneal: bool = True
    plain: bool = False

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"shaping beta must be positive, got {self.beta}")

    def weight(self, c: float) -> float:
        return 1.0 - c if self.confidence_anneal else 1.0


@dataclass
class BatchStats:
    n_tokens: int
    n_teacher_tokens: int
    n_teacher: int
    surrogate_objective: float
    teacher_objective: float
    mean_abs_advantage: float
    clip_fraction: float

    @property
    def teacher_token_share(self) -> float:
        return self.n_teacher_tokens / self.n_tokens if self.n_tokens else 0.0


def _teacher_terms(params, batch: TokenBatch, weights: np.ndarray, shaping: ShapingConfig):
    lp, probs = token_logps(params, batch)
    w = weights[batch.owner]
    if shaping.plain:
        return float(np.sum(w * lp)), score_rows(batch, probs, w)
    p = np.exp(lp)
    beta = shaping.beta
    obj = w * p / (p + beta)
    # d f(p) / d logp = f'(p) p = beta p / (p + beta)^2
    coef = w * beta * p / (p + beta) ** 2
    return float(obj.sum()), score_rows(batch, probs, coef)


def teacher_loss(
    params: PolicyParams,
    teacher: Trajectory,
    c: float,
    shaping: ShapingConfig = ShapingConfig(),
) -> tuple[float, SparseGrad]:
    """Token-summed shaped likelihood of one teacher demonstration."""
    if not teacher.is_teacher:
        raise ValueError("teacher_loss needs a trajectory flagged is_teacher")
    batch = TokenBatch.build(params, [teacher])
    return _teacher_terms(params, batch, np.array([shaping.weight(c)]), shaping)


def hapo_batch_objective(
    params: PolicyParams,
    old_params: PolicyParams | None,
    groups: Sequence[Group],
    shaping: ShapingConfig = ShapingConfig(),
    eps_clip: float = DEFAULT_EPS_CLIP,
    teacher_weight: float = 1.0,
    count_teacher_tokens: bool = True,
) -> tuple[float, SparseGrad, BatchStats]:
    """Normalized HAPO objective, its gradient, and batch statistics.

    ``teacher_weight`` multiplies the teacher branch (1 for HAPO; lambda for a
    static mixture). ``count_teacher_tokens=False`` drops teacher tokens from
    the normalizing denominator.
    """
    if not groups:
        raise ValueError("empty batch")
    for g in groups:
        if g.confidence is None:
            raise StateError(f"group {g.group_id} has not been through the gate")
        if g.advantages is None:
            raise StateError(f"group {g.group_id} has no advantages")
    trajs, advs = on_policy_view(groups)
    teachers = [tr for g in groups for tr in g.trajectories if tr.is_teacher]
    weights = np.array([teacher_weight * shaping.weight(g.confidence)
                        for g in groups for tr in g.trajectories if tr.is_teacher])

    batch = TokenBatch.build(params, trajs)
    surr = surrogate_terms(params, batch, old_token_logps(trajs, old_params, batch), advs, eps_clip)
    objective, grad = surr.objective, surr.grad
    teacher_obj, n_teacher_tokens = 0.0, 0
    if teachers:
        tbatch = TokenBatch.build(params, teachers)
        teacher_obj, tgrad = _teacher_terms(params, tbatch, weights, shaping)
        objective = objective + teacher_obj
        grad = grad + tgrad
        n_teacher_tokens = len(tbatch)

    denom = len(batch) + (n_teacher_tokens if count_teacher_tokens else 0)
    if denom == 0:
        raise ValueError("batch has no tokens")
    stats = BatchStats(
        n_tokens=len(batch) + n_teacher_tokens,
        n_teacher_tokens=n_teacher_tokens,
        n_teacher=len(teachers),
        surrogate_objective=surr.objective / denom,
        teacher_objective=teacher_obj / denom,
        mean_abs_advantage=float(np.mean(np.abs(advs))) if advs.size else 0.0,
        clip_fraction=surr.clip_fraction,
    )
    return objective / denom, grad / denom, stats
