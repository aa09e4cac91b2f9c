"""Finite-difference audit of every analytic gradient in the lab.

Each instance draws a small random task and policy, evaluates one objective
and compares its analytic gradient with central differences over every
logit the objective can touch. The error is norm-wise relative:
||g - g_fd|| / max(||g||, ||g_fd||), with zero reported when both vanish.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .baselines import sft_objective
from .env import make_lock_task, teacher_demo
from .gating import Constant, GateConfig, gate_and_inject
from .grpo import TokenBatch, compute_advantages, old_token_logps, on_policy_view, rollout_groups, token_logps
from .hapo import ShapingConfig, hapo_batch_objective, teacher_loss
from .policy import PolicyParams, SparseGrad, grad_logp, logp

AUDITS = ("logp", "sft", "teacher_loss", "hapo")
ZERO_NORM = 1e-12


def central_difference(params: PolicyParams, fn: Callable[[PolicyParams], float], codes, h: float = 1e-5) -> SparseGrad:
    """d fn / d logits for the rows ``codes``, by central differences."""
    codes = np.unique(np.asarray(codes, dtype=np.int64))
    work = params.copy()
    base = work.logits(codes)
    out = np.zeros_like(base)
    for i, code in enumerate(codes.tolist()):
        for v in range(work.vocab_size):
            row = base[i].copy()
            row[v] = base[i, v] + h
            work.set_logits(code, row)
            up = fn(work)
            row[v] = base[i, v] - h
            work.set_logits(code, row)
            down = fn(work)
            out[i, v] = (up - down) / (2 * h)
        work.set_logits(code, base[i])
    return SparseGrad(codes, out)


def relative_error(analytic: SparseGrad, numeric: SparseGrad) -> float:
    scale = max(analytic.norm(), numeric.norm())
    if scale < ZERO_NORM:
        return 0.0
    return (analytic - numeric).norm() / scale


@dataclass
class AuditResult:
    name: str
    instance: int
    error: float
    n_params: int
    excluded: bool = False


@dataclass
class GradcheckReport:
    seed: int
    h: float
    tol: float
    results: list[AuditResult] = field(default_factory=list)

    def max_error(self, name: str | None = None) -> float:
        errs = [r.error for r in self.results if not r.excluded and (name is None or r.name == name)]
        return max(errs) if errs else 0.0

    @property
    def n_excluded(self) -> int:
        return sum(r.excluded for r in self.results)

    @property
    def passed(self) -> bool:
        return self.max_error() < self.tol

    def to_dict(self) -> dict:
        return {
            "schema": "hapolab.gradcheck/1",
            "seed": self.seed,
            "h": self.h,
            "tol": self.tol,
            "passed": self.passed,
            "max_relative_error": self.max_error(),
            "per_audit": {a: self.max_error(a) for a in AUDITS},
            "n_instances": len({r.instance for r in self.results}),
            "n_excluded": self.n_excluded,
            "results": [asdict(r) for r in self.results],
        }


def _random_instance(rng: np.random.Generator):
    vocab = int(rng.integers(2, 5))
    length = int(rng.integers(1, 4))
    n_prompts = int(rng.integers(1, 3))
    n_sol = int(rng.integers(1, min(2, vocab**length) + 1))
    task = make_lock_task(vocab, n_prompts, length, n_sol, seed=int(rng.integers(2**31)))
    params = PolicyParams.for_task(task)
    for p in task.prompts:
        for t in range(length):
            for prefix in np.ndindex(*([vocab] * t)):
                params.set_logits(params.key(p, prefix), rng.normal(0.0, 1.5, vocab))
    return task, params


def _near_clip_kink(params, old, groups, eps_clip, margin=1e-4) -> bool:
    """True when some ratio sits within ``margin`` of 1 +/- eps (a non-differentiable point)."""
    trajs, _ = on_policy_view(groups)
    if not trajs:
        return False
    batch = TokenBatch.build(params, trajs)
    ratio = np.exp(token_logps(params, batch)[0] - old_token_logps(trajs, old, batch))
    return bool(np.any(np.abs(np.abs(ratio - 1.0) - eps_clip) < margin))


def run_gradcheck(instances: int = 100, seed: int = 0, h: float = 1e-5, tol: float = 1e-5) -> GradcheckReport:
    """Audit logp, SFT, shaped teacher loss and the HAPO batch objective at theta = theta_old."""
    rng = np.random.default_rng(seed)
    report = GradcheckReport(seed=seed, h=h, tol=tol)
    for i in range(instances):
        task, params = _random_instance(rng)
        all_codes = params.items()[0]

        prompt = task.prompts[int(rng.integers(len(task.prompts)))]
        prefix = tuple(int(x) for x in rng.integers(0, task.vocab_size, int(rng.integers(task.max_len))))
        key = params.key(prompt, prefix)
        tok = int(rng.integers(task.vocab_size))
        g = grad_logp(params, key, tok)
        num = central_difference(params, lambda p: logp(p, key, tok), [params.encode(key)], h)
        report.results.append(AuditResult("logp", i, relative_error(g, num), num.values.size))

        demos = [teacher_demo(task, p) for p in task.prompts]
        _, g = sft_objective(params, demos)
        num = central_difference(params, lambda p: sft_objective(p, demos)[0], all_codes, h)
        report.results.append(AuditResult("sft", i, relative_error(g, num), num.values.size))

        shaping = ShapingConfig(beta=float(rng.uniform(0.05, 1.0)), confidence_anneal=bool(rng.integers(2)))
        c = float(rng.uniform())
        demo = demos[0]
        _, g = teacher_loss(params, demo, c, shaping)
        num = central_difference(params, lambda p: teacher_loss(p, demo, c, shaping)[0], all_codes, h)
        report.results.append(AuditResult("teacher_loss", i, relative_error(g, num), num.values.size))

        old = params.copy()
        n = int(rng.integers(2, 5))
        groups = rollout_groups(old, task, list(task.prompts), n, rng)
        gamma = float(rng.uniform(0.3, 0.95))
        groups, _ = gate_and_inject(groups, task, GateConfig(Constant(gamma)), 0)
        groups = [compute_advantages(gr) for gr in groups]
        eps_clip = 0.2
        kink = _near_clip_kink(params, old, groups, eps_clip)
        _, g, _ = hapo_batch_objective(params, old, groups, shaping, eps_clip)
        num = central_difference(params, lambda p: hapo_batch_objective(p, old, groups, shaping, eps_clip)[0],
                                 all_codes, h)
        report.results.append(AuditResult("hapo", i, relative_error(g, num), num.values.size, excluded=kink))
    return report
