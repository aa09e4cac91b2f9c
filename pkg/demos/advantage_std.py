"""Population versus sample std in the group advantage: how much does it matter?

The two differ by the factor sqrt(N/(N-1)), a uniform rescaling of every
advantage in a group. Under SGD that is a per-group learning-rate change.
Run: python demos/advantage_std.py
"""

from dataclasses import replace

import numpy as np

from hapolab.baselines import BaselineConfig
from hapolab.env import make_lock_task
from hapolab.experiments import steps_to_success
from hapolab.grpo import normalized_advantages
from hapolab.trainer import LRSchedule, TrainConfig, train

r = np.array([1, 0, 0, 0, 1, 0, 0, 0])
for ddof in (0, 1):
    a = normalized_advantages(r, ddof=ddof)
    print(f"ddof={ddof}: advantages {np.round(a, 3)}  std {a.std():.3f}")

task = make_lock_task(4, 8, 3, 1, seed=0)
base = TrainConfig(steps=400, batch_prompts=8, group_size=8, lr=LRSchedule("constant", 5.0), track_consistency=False)
for ddof in (0, 1):
    steps = [steps_to_success(train(task, replace(base, seed=s, std_ddof=ddof), BaselineConfig("hapo")))
             for s in range(3)]
    print(f"ddof={ddof}: steps to 0.9 trailing success per seed {steps}")
