"""Group rollouts, group-relative advantages and the clipped surrogate."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Sequence

import numpy as np

from .env import TaskSpec, Trajectory
from .policy import PolicyParams, SparseGrad, log_softmax, sample_trajectories, token_contexts

EPS_STD = 1e-8
DEFAULT_EPS_CLIP = 0.2


@dataclass
class Group:
    prompt: int
    trajectories: list[Trajectory]
    advantages: np.ndarray | None = None
    confidence: float | None = None
    injected: bool = False
    decision: object | None = None
    replaced: Trajectory | None = None
    group_id: int = 0
    success_count: int = field(init=False)

    def __post_init__(self):
        self.success_count = int(sum(tr.reward for tr in self.trajectories))
        n_teacher = sum(tr.is_teacher for tr in self.trajectories)
        if n_teacher > 1 or (n_teacher and not self.injected):
            raise ValueError("a group holds a teacher trajectory only after injection, and at most one")

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.trajectories], dtype=np.float64)


def rollout_groups(
    params: PolicyParams,
    task: TaskSpec,
    prompts: Sequence[int],
    n: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> list[Group]:
    """Sample ``n`` responses for each prompt in one batched pass."""
    if n < 2:
        raise ValueError(f"group size must be >= 2, got {n}")
    for p in prompts:
        task.prompt_index(p)
    flat = [p for p in prompts for _ in range(n)]
    trajs = sample_trajectories(params, task, flat, rng, temperature)
    return [Group(p, trajs[i * n:(i + 1) * n], group_id=i) for i, p in enumerate(prompts)]


def rollout_group(params, task, prompt, n, rng, temperature=1.0) -> Group:
    return rollout_groups(params, task, [prompt], n, rng, temperature)[0]


def normalized_advantages(rewards: np.ndarray, eps_std: float = EPS_STD, ddof: int = 0) -> np.ndarray:
    """(R - mean) / std within a group; all zeros when the rewards do not vary.

    ``ddof=0`` is the population standard deviation, ``ddof=1`` the sample one.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    std = rewards.std(ddof=ddof) if rewards.size > ddof else 0.0
    if std < eps_std:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / max(std, eps_std)


def compute_advantages(group: Group, eps_std: float = EPS_STD, ddof: int = 0) -> Group:
    return replace(group, advantages=normalized_advantages(group.rewards, eps_std, ddof))


@dataclass
class TokenBatch:
    """Per-token view of a list of trajectories."""

    codes: np.ndarray
    tokens: np.ndarray
    owner: np.ndarray
    n_trajectories: int

    @classmethod
    def build(cls, params: PolicyParams, trajectories: Sequence[Trajectory]) -> "TokenBatch":
        codes, tokens, owner = token_contexts(params, trajectories)
        return cls(codes, tokens, owner, len(trajectories))

    def __len__(self):
        return len(self.tokens)


def token_logps(params: PolicyParams, batch: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
    """Log-probabilities of the batch tokens and the full softmax rows."""
    lps = log_softmax(params.logits(batch.codes))
    idx = np.arange(len(batch))
    return lps[idx, batch.tokens], np.exp(lps)


def score_rows(batch: TokenBatch, probs: np.ndarray, coef: np.ndarray) -> SparseGrad:
    """Sum of ``coef_k * d logp_k / d logits`` over the batch tokens."""
    rows = -probs * coef[:, None]
    rows[np.arange(len(batch)), batch.tokens] += coef
    return SparseGrad.from_rows(batch.codes, rows)


@dataclass
class SurrogateTerms:
    objective: float
    grad: SparseGrad
    n_tokens: int
    clip_fraction: float


def surrogate_terms(
    params: PolicyParams,
    batch: TokenBatch,
    old_logps: np.ndarray,
    advantages: np.ndarray,
    eps_clip: float = DEFAULT_EPS_CLIP,
) -> SurrogateTerms:
    """Token-summed clipped surrogate and its gradient.

    ``advantages`` is per trajectory. The gradient of a token is zero where
    the clipped branch is the minimum; elsewhere it is ``A * r * grad logp``.
    """
    if len(batch) == 0:
        return SurrogateTerms(0.0, SparseGrad.zeros(params.vocab_size), 0, 0.0)
    lp, probs = token_logps(params, batch)
    adv = np.asarray(advantages, dtype=np.float64)[batch.owner]
    ratio = np.exp(lp - old_logps)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * adv
    active = unclipped <= clipped
    contrib = np.where(active, unclipped, clipped)
    coef = np.where(active, adv * ratio, 0.0)
    return SurrogateTerms(
        objective=float(contrib.sum()),
        grad=score_rows(batch, probs, coef),
        n_tokens=len(batch),
        clip_fraction=float(np.mean(~active & (adv != 0))),
    )


def old_token_logps(trajectories: Sequence[Trajectory], old_params: PolicyParams | None,
                    batch: TokenBatch) -> np.ndarray:
    """Behavior log-probabilities: recomputed from a snapshot when given."""
    if old_params is not None:
        return token_logps(old_params, batch)[0]
    if not trajectories:
        return np.empty(0)
    return np.concatenate([tr.behavior_logps for tr in trajectories])


def clip_surrogate(
    params: PolicyParams,
    old_logps: Sequence[np.ndarray] | None,
    group: Group,
    eps_clip: float = DEFAULT_EPS_CLIP,
) -> tuple[float, SparseGrad]:
    """Clipped surrogate of one group, summed over tokens (not normalized).

    ``old_logps`` holds one array per trajectory; ``None`` uses the recorded
    behavior log-probabilities.
    """
    if group.advantages is None:
        raise ValueError("compute advantages before evaluating the surrogate")
    if any(tr.is_teacher for tr in group.trajectories):
        raise ValueError("clip_surrogate only scores on-policy trajectories")
    if old_logps is None:
        old_logps = [tr.behavior_logps for tr in group.trajectories]
    if len(old_logps) != group.size:
        raise ValueError("need one old log-prob array per trajectory")
    for tr, old in zip(group.trajectories, old_logps):
        if len(old) != len(tr.tokens):
            raise ValueError(f"token/old_logp length mismatch: {len(tr.tokens)} vs {len(old)}")
    batch = TokenBatch.build(params, group.trajectories)
    old = np.concatenate([np.asarray(o, dtype=np.float64) for o in old_logps])
    terms = surrogate_terms(params, batch, old, group.advantages, eps_clip)
    return terms.objective, terms.grad


def on_policy_view(groups: Iterable[Group]) -> tuple[list[Trajectory], np.ndarray]:
    """All non-teacher trajectories of a batch with their advantages."""
    trajs, advs = [], []
    for g in groups:
        if g.advantages is None:
            raise ValueError(f"group {g.group_id} has no advantages")
        for tr, a in zip(g.trajectories, g.advantages):
            if not tr.is_teacher:
                trajs.append(tr)
                advs.append(a)
    return trajs, np.array(advs, dtype=np.float64)


def grpo_batch_objective(
    params: PolicyParams,
    old_params: PolicyParams | None,
    groups: Sequence[Group],
    eps_clip: float = DEFAULT_EPS_CLIP,
) -> tuple[float, SparseGrad]:
    """Token-count-normalized GRPO objective over a batch of groups."""
    trajs, advs = on_policy_view(groups)
    batch = TokenBatch.build(params, trajs)
    if len(batch) == 0:
        raise ValueError("empty batch")
    terms = surrogate_terms(params, batch, old_token_logps(trajs, old_params, batch), advs, eps_clip)
    return terms.objective / len(batch), terms.grad / len(batch)


def group_record(group: Group, step: int | None = None) -> dict:
    """JSON-ready record of a group (one line of the group stream)."""
    rec = {
        "step": step,
        "group_id": group.group_id,
        "prompt": group.prompt,
        "success_count": group.success_count,
        "confidence": group.confidence,
        "injected": group.injected,
        "advantages": None if group.advantages is None else [float(a) for a in group.advantages],
        "trajectories": [
            {
                "tokens": list(tr.tokens),
                "reward": tr.reward,
                "is_teacher": tr.is_teacher,
                "behavior_logps": [float(x) for x in tr.behavior_logps],
            }
            for tr in group.trajectories
        ],
    }
    return rec


def write_groups(groups: Iterable[Group], fh: IO[str], step: int | None = None) -> None:
    for g in groups:
        fh.write(json.dumps(group_record(g, step)) + "\n")


def read_groups(fh: IO[str]) -> list[tuple[int | None, Group]]:
    out = []
    for line in fh:
        if not line.strip():
            continue
        rec = json.loads(line)
        trajs = [
            Trajectory(rec["prompt"], t["tokens"], np.array(t["behavior_logps"]), t["reward"], t["is_teacher"])
            for t in rec["trajectories"]
        ]
        g = Group(rec["prompt"], trajs, injected=rec["injected"], group_id=rec["group_id"],
                  confidence=rec["confidence"])
        if rec["advantages"] is not None:
            g.advantages = np.array(rec["advantages"])
        out.append((rec["step"], g))
    return out
