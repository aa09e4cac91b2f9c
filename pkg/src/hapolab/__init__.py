"""Hindsight-anchored policy optimization on synthetic verifiable tasks."""

from .baselines import BaselineConfig, non_teacher_probability, run_method, sft_objective, static_mix_step
from .env import TaskSpec, Trajectory, load_task, make_chain_task, make_lock_task, save_task, teacher_demo, verify
from .gating import (
    Constant,
    GateConfig,
    GateDecision,
    Sigmoid,
    Step,
    confidence,
    gate_and_inject,
    ssi_transform,
    threshold_at,
)
from .grpo import Group, clip_surrogate, compute_advantages, grpo_batch_objective, rollout_group, rollout_groups
from .hapo import BatchStats, ShapingConfig, hapo_batch_objective, teacher_loss
from .metrics import RunMetrics, StepMetrics, check_hoeffding, consistency_probe, export_curves
from .policy import ContextKey, PolicyParams, SparseGrad, grad_logp, logp, sample_trajectory
from .trainer import LRSchedule, TrainConfig, TrainState, evaluate, load_checkpoint, save_checkpoint, train, train_step

__version__ = "0.1.0"
