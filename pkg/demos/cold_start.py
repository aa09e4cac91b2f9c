"""Cold start: a sparse lock task GRPO never solves, and the gated teacher bootstrapping it.

A single seed of the acceptance setting; takes about a minute.
Run: python demos/cold_start.py [seed]
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from hapolab.config import build_method, build_task, build_train_config, load_config
from hapolab.experiments import steps_to_success, trailing_mean
from hapolab.trainer import train

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "cold_start.json")
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
task = build_task(cfg, seed=seed)
tc = replace(build_train_config(cfg), seed=seed, track_consistency=False)
hapo = build_method(cfg)
print(f"{len(task.prompts)} prompts, vocab {task.vocab_size}, length {task.max_len}: "
      f"a uniform policy succeeds with probability {task.vocab_size ** -task.max_len:.1e}")

runs = {m: train(task, tc, replace(hapo, method=m)) for m in ("grpo", "hapo")}
for name, run in runs.items():
    tm = trailing_mean(run.column("mean_reward"), 50)
    inj = run.column("teacher_injection_count")
    print(f"{name:5s} peak trailing success {tm.max():.3f}, reached 0.9 at step "
          f"{steps_to_success(run)}, injections/step first {inj[:500].mean():.2f} last {inj[-500:].mean():.2f}")

# Once the policy is confident, the gate closes and the run is plain GRPO.
inj = runs["hapo"].column("teacher_injection_count")
blocks = inj.reshape(-1, 100).sum(axis=1).astype(int)
print("HAPO injections per 100 steps:", blocks.tolist())
print("GRPO all-equal (zero-gradient) groups per step:",
      np.round(runs["grpo"].column("n_degenerate").mean(), 2), "of", tc.batch_prompts)
