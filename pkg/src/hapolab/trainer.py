"""Synchronous on-policy training loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .baselines import BaselineConfig, sft_objective
from .env import TaskSpec, teacher_demo
from .exceptions import ConfigError, NonFiniteGradientError
from .gating import GateConfig, gate_and_inject, threshold_at
from .grpo import compute_advantages, grpo_batch_objective, rollout_groups
from .hapo import ShapingConfig, hapo_batch_objective
from .metrics import MetricsWriter, RunMetrics, StepMetrics, TrajectoryLog
from .policy import PolicyParams, SparseGrad, cosine, sample_tokens, sequence_logp

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "hapolab.checkpoint/1"


@dataclass(frozen=True)
class LRSchedule:
    """``constant``: eta0 every step; ``inv_sqrt``: eta0 / sqrt(t + 1)."""

    kind: str = "constant"
    eta0: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "inv_sqrt"):
            raise ConfigError(f"unknown lr schedule {self.kind!r}")
        if not self.eta0 > 0:
            raise ConfigError("eta0 must be positive")

    def at(self, step: int) -> float:
        if self.kind == "inv_sqrt":
            return self.eta0 / math.sqrt(step + 1)
        return self.eta0


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_prompts: int = 16
    group_size: int = 8
    lr: LRSchedule = field(default_factory=LRSchedule)
    seed: int = 0
    gate: GateConfig = field(default_factory=GateConfig)
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    eps_clip: float = 0.2
    updates_per_batch: int = 1
    optimizer: str = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    temperature: float = 1.0
    count_teacher_tokens: bool = True
    eps_std: float = 1e-8
    std_ddof: int = 0
    context_order: int | None = None
    track_consistency: bool = True
    log_trajectories: bool = False

    def __post_init__(self):
        for name in ("steps", "batch_prompts", "updates_per_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if not 0 < self.eps_clip < 1:
            raise ConfigError("eps_clip must lie in (0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.std_ddof not in (0, 1):
            raise ConfigError("std_ddof must be 0 (population) or 1 (sample)")
        if not self.temperature > 0:
            raise ConfigError("training temperature must be positive")


class Adam:
    """Lazy Adam over the logit table: only rows in the gradient move."""

    def __init__(self, like: PolicyParams, betas=(0.9, 0.999), eps=1e-8):
        self.m = PolicyParams(like.vocab_size, like.max_len, like.prompts, like.context_order)
        self.v = self.m.copy()
        self.betas, self.eps, self.t = betas, eps, 0

    def direction(self, grad: SparseGrad) -> SparseGrad:
        b1, b2 = self.betas
        self.t += 1
        m = b1 * self.m.logits(grad.codes) + (1 - b1) * grad.values
        v = b2 * self.v.logits(grad.codes) + (1 - b2) * grad.values**2
        self.m.set_rows(grad.codes, m)
        self.v.set_rows(grad.codes, v)
        mhat = m / (1 - b1**self.t)
        vhat = v / (1 - b2**self.t)
        return SparseGrad(grad.codes, mhat / (np.sqrt(vhat) + self.eps))


@dataclass
class TrainState:
    params: PolicyParams
    rng: np.random.Generator
    step: int = 0
    cursor: int = 0
    optimizer: Adam | None = None

    @classmethod
    def fresh(cls, task: TaskSpec, config: TrainConfig) -> "TrainState":
        params = PolicyParams.for_task(task, config.context_order)
        opt = Adam(params, config.adam_betas, config.adam_eps) if config.optimizer == "adam" else None
        return cls(params=params, rng=np.random.default_rng(config.seed), optimizer=opt)


def _teacher_excluded_stats(groups):
    """Mean reward and length over the policy's own samples (swapped-out ones included)."""
    rewards, lengths = [], []
    for g in groups:
        own = [t for t in g.trajectories if not t.is_teacher]
        if g.replaced is not None:
            own.append(g.replaced)
        rewards += [t.reward for t in own]
        lengths += [len(t) for t in own]
    return float(np.mean(rewards)), float(np.mean(lengths))


def train_step(
    state: TrainState,
    task: TaskSpec,
    config: TrainConfig,
    method: BaselineConfig = BaselineConfig(),
    trajectory_log: TrajectoryLog | None = None,
    gradient_sink: Callable[[int, SparseGrad, SparseGrad], None] | None = None,
) -> tuple[TrainState, StepMetrics]:
    """One rollout batch followed by ``updates_per_batch`` ascent steps.

    ``gradient_sink(step, grad, grpo_grad)`` receives the first-update
    gradient and the pure-GRPO gradient of the same batch before injection.
    """
    t = state.step
    old = state.params.copy()
    n_prompts = len(task.prompts)
    prompts = [task.prompts[(state.cursor + i) % n_prompts] for i in range(config.batch_prompts)]
    state.cursor = (state.cursor + config.batch_prompts) % n_prompts

    groups = rollout_groups(old, task, prompts, config.group_size, state.rng, config.temperature)
    phase = method.phase(t)
    gate = method.gate_for(config.gate) if phase == "rl" else GateConfig(config.gate.schedule, mode="never")
    gated, confs = gate_and_inject(groups, task, gate, t, state.rng)
    gated = [compute_advantages(g, config.eps_std, config.std_ddof) for g in gated]
    n_injected = sum(g.injected for g in gated)
    lr = config.lr.at(t)

    def evaluate_objective(params):
        if phase == "sft":
            obj, grad = sft_objective(params, [teacher_demo(task, p) for p in prompts])
            return obj, grad, None
        return hapo_batch_objective(
            params, old, gated, method.shaping_for(config.shaping), config.eps_clip,
            teacher_weight=method.teacher_weight, count_teacher_tokens=config.count_teacher_tokens,
        )

    first = None
    grad_norm = 0.0
    for _ in range(config.updates_per_batch):
        obj, grad, stats = evaluate_objective(state.params)
        if first is None:
            first = (obj, grad, stats)
        if not (grad.is_finite() and math.isfinite(obj)):
            raise NonFiniteGradientError(
                f"non-finite objective or gradient at step {t}",
                dump={"step": t, "objective": obj, "prompts": prompts, "grad_codes": grad.codes.tolist(),
                      "grad_values": grad.values.tolist(), "method": method.method},
            )
        grad_norm = max(grad_norm, grad.norm())
        direction = state.optimizer.direction(grad) if state.optimizer else grad
        state.params.add(direction, lr)

    obj, grad, stats = first
    cos = float("nan")
    if phase == "rl" and (config.track_consistency or gradient_sink is not None):
        if n_injected == 0:
            rl_grad, cos = grad, 1.0
        else:
            stripped = [compute_advantages(g, config.eps_std, config.std_ddof) for g in groups]
            _, rl_grad = grpo_batch_objective(old, old, stripped, config.eps_clip)
            cos = cosine(grad, rl_grad)
        if gradient_sink is not None:
            gradient_sink(t, grad, rl_grad)

    if trajectory_log is not None:
        trajectory_log.write_groups(t, gated)

    mean_reward, mean_len = _teacher_excluded_stats(gated)
    rec = StepMetrics(
        step=t,
        mean_reward=mean_reward,
        mean_gen_length=mean_len,
        teacher_injection_count=config.batch_prompts if phase == "sft" else n_injected,
        mean_confidence=float(np.mean(confs)),
        threshold=threshold_at(config.gate, t),
        grad_norm=grad_norm,
        objective_value=obj,
        lr=lr,
        phase=phase,
        n_groups=len(gated),
        n_degenerate=sum(int(g.success_count in (0, g.size)) for g in groups),
        teacher_token_share=stats.teacher_token_share if stats else 1.0,
        mean_abs_advantage=stats.mean_abs_advantage if stats else 0.0,
        clip_fraction=stats.clip_fraction if stats else 0.0,
        consistency_cosine=cos,
    )
    state.step += 1
    return state, rec


def train(
    task: TaskSpec,
    config: TrainConfig,
    method: BaselineConfig = BaselineConfig(),
    output_dir=None,
    state: TrainState | None = None,
    steps: int | None = None,
    checkpoint_every: int | None = None,
    callback: Callable[[StepMetrics], None] | None = None,
    gradient_sink: Callable[[int, SparseGrad, SparseGrad], None] | None = None,
) -> RunMetrics:
    """Run ``steps`` training steps (default: up to ``config.steps``) from ``state``.

    With ``output_dir`` the metrics CSV (and trajectory JSONL when enabled)
    are written there, appending when resuming, and a final checkpoint is saved.
    """
    resumed = state is not None
    state = state or TrainState.fresh(task, config)
    n_steps = config.steps - state.step if steps is None else steps
    run = RunMetrics(method=method.method, seed=config.seed, state=state)
    writer = tlog = None
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        run.output_dir = out
        writer = MetricsWriter(out / "metrics.csv", append=resumed)
        if config.log_trajectories:
            tlog = TrajectoryLog(out / "trajectories.jsonl", append=resumed)
    try:
        for _ in range(n_steps):
            state, rec = train_step(state, task, config, method, tlog, gradient_sink)
            run.records.append(rec)
            if writer:
                writer.write(rec)
            if callback:
                callback(rec)
            if checkpoint_every and output_dir is not None and state.step % checkpoint_every == 0:
                save_checkpoint(Path(output_dir) / "checkpoint.npz", state)
    finally:
        if writer:
            writer.close()
        if tlog:
            tlog.close()
    if output_dir is not None:
        save_checkpoint(Path(output_dir) / "checkpoint.npz", state)
    run.params = state.params
    return run


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, state: TrainState) -> Path:
    """Policy table, optimizer moments, rng state, step and prompt cursor."""
    path = Path(path)
    codes, logits = state.params.items()
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "step": state.step,
        "cursor": state.cursor,
        "rng": state.rng.bit_generator.state,
        "params": state.params.meta(),
        "adam_t": state.optimizer.t if state.optimizer else None,
        "adam": None if state.optimizer is None else {"betas": state.optimizer.betas, "eps": state.optimizer.eps},
    }
    arrays = {"codes": codes, "logits": logits, "meta": np.array(json.dumps(meta))}
    if state.optimizer:
        arrays["m_codes"], arrays["m"] = state.optimizer.m.items()
        arrays["v_codes"], arrays["v"] = state.optimizer.v.items()
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> TrainState:
    with np.load(Path(path)) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("schema") != CHECKPOINT_SCHEMA:
            raise ConfigError(f"unsupported checkpoint schema {meta.get('schema')!r}")
        pm = meta["params"]
        params = PolicyParams(pm["vocab_size"], pm["max_len"], pm["prompts"], pm["context_order"])
        params._restore(data["codes"], data["logits"])
        opt = None
        if meta["adam"] is not None:
            opt = Adam(params, tuple(meta["adam"]["betas"]), meta["adam"]["eps"])
            opt.m._restore(data["m_codes"], data["m"])
            opt.v._restore(data["v_codes"], data["v"])
            opt.t = meta["adam_t"]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(params=params, rng=rng, step=meta["step"], cursor=meta["cursor"], optimizer=opt)


# -- evaluation ------------------------------------------------------------


@dataclass
class EvalReport:
    temperature: float
    n_samples: int
    success_rate: dict[int, float]
    mean_success: float
    mean_gen_length: float
    exact_success: dict[int, float]
    solution_probabilities: dict[int, dict[tuple[int, ...], float]]
    teacher_probability: float
    non_teacher_probability: float

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "n_samples": self.n_samples,
            "mean_success": self.mean_success,
            "mean_gen_length": self.mean_gen_length,
            "teacher_probability": self.teacher_probability,
            "non_teacher_probability": self.non_teacher_probability,
            "success_rate": {str(k): v for k, v in self.success_rate.items()},
            "exact_success": {str(k): v for k, v in self.exact_success.items()},
            "solution_probabilities": {
                str(p): {" ".join(map(str, s)): v for s, v in d.items()}
                for p, d in self.solution_probabilities.items()
            },
        }


def _greedy_sequence(params, task, prompt):
    toks, _, n = sample_tokens(params, task, [prompt], np.random.default_rng(0), temperature=0)
    return tuple(toks[0, : n[0]].tolist())


def evaluate(
    params: PolicyParams,
    task: TaskSpec,
    n_samples: int = 32,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> EvalReport:
    """Sampled success rate per prompt (avg@n) plus exact answer probabilities.

    ``temperature`` rescales logits; 0 means greedy decoding, for which the
    exact probabilities are those of the single greedy answer.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    rng = rng or np.random.default_rng(0)
    success, exact, sols = {}, {}, {}
    lengths = []
    teacher_p, other_p = [], []
    for p in task.prompts:
        toks, _, n = sample_tokens(params, task, [p] * n_samples, rng, temperature)
        seqs = [tuple(row[:k].tolist()) for row, k in zip(toks, n)]
        success[p] = float(np.mean([s in task.accepted[p] for s in seqs]))
        lengths += n.tolist()
        if temperature == 0:
            greedy = _greedy_sequence(params, task, p)
            probs = {s: float(s == greedy) for s in sorted(task.accepted[p])}
        else:
            probs = {s: float(np.exp(sequence_logp(params, p, s, temperature))) for s in sorted(task.accepted[p])}
        sols[p] = probs
        exact[p] = float(sum(probs.values()))
        demo = task.teacher_demos.get(p)
        teacher_p.append(probs.get(demo, 0.0))
        other_p.append(sum(v for s, v in probs.items() if s != demo))
    return EvalReport(
        temperature=temperature,
        n_samples=n_samples,
        success_rate=success,
        mean_success=float(np.mean(list(success.values()))),
        mean_gen_length=float(np.mean(lengths)),
        exact_success=exact,
        solution_probabilities=sols,
        teacher_probability=float(np.mean(teacher_p)),
        non_teacher_probability=float(np.mean(other_p)),
    )
