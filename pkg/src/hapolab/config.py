"""Experiment configuration: JSON file + dotted overrides -> fully resolved dict.

Every key has a default that is echoed into the resolved config, unknown keys
are rejected with their dotted path, and type mismatches are reported per
field before any compute starts.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any

from .baselines import BaselineConfig
from .env import TaskSpec, load_task, make_chain_task, make_lock_task
from .exceptions import ConfigError
from .gating import Constant, GateConfig, Sigmoid, Step
from .hapo import ShapingConfig
from .trainer import LRSchedule, TrainConfig

CONFIG_SCHEMA = "hapolab.config/1"
OUTPUT_ROOT_ENV = "HAPOLAB_OUTPUT_ROOT"

SCHEDULES = {
    "constant": {"gamma": 0.8},
    "step": {"gamma0": None, "gamma1": None, "switch_step": None},
    "sigmoid": {"gamma_min": None, "gamma_max": None, "midpoint": None, "slope": None},
}

DEFAULTS: dict[str, Any] = {
    "schema": CONFIG_SCHEMA,
    "task": {
        "family": "lock",
        "seed": 0,
        "lock": {"vocab_size": 8, "n_prompts": 16, "seq_len": 4, "n_solutions_per_prompt": 1,
                 "verified_teacher": True},
        "chain": {"n_prompts": 8, "max_digit": 3, "min_target": 3, "max_target": 6},
        "path": None,
    },
    "method": {"method": "hapo", "switch_step": 0, "use_shaping": True, "lambda_mix": 1.0},
    "train": {
        "steps": 500,
        "batch_prompts": 16,
        "group_size": 8,
        "lr": {"kind": "constant", "eta0": 10.0},
        "seed": 0,
        "gate": {
            "schedule": {"kind": "constant", "gamma": 0.8},
            "mode": "gated",
            "prior": [1.0, 1.0],
            "posterior_sampling": False,
            "tie_break": "lowest",
        },
        "shaping": {"beta": 0.1, "confidence_anneal": True, "plain": False},
        "eps_clip": 0.2,
        "updates_per_batch": 1,
        "optimizer": "sgd",
        "adam_betas": [0.9, 0.999],
        "adam_eps": 1e-8,
        "temperature": 1.0,
        "count_teacher_tokens": True,
        "eps_std": 1e-8,
        "std_ddof": 0,
        "context_order": None,
        "track_consistency": True,
        "log_trajectories": False,
    },
    "output": {"dir": "runs/default", "checkpoint_every": 0},
    "eval": {"n_samples": 64, "temperature": 1.0, "seed": 0, "checkpoint": None},
    "compare": {
        "methods": ["grpo", "sft", "static_mix", "hapo"],
        "lambda_mix": [0.5, 1.0, 2.0],
        "seeds": list(range(10)),
        "task_seed_from_run": True,
        "success_window": 50,
    },
    "bounds": {"n_groups": 100_000, "seed": 0, "cells": None, "max_n": 64, "gamma_percent": [1, 99],
               "n_se": 3.0, "mutation": None},
    "gradcheck": {"instances": 100, "seed": 0, "h": 1e-5, "tol": 1e-5},
}

# keys whose default is None but whose value must still have a given type
NULLABLE_TYPES = {
    "task.path": str,
    "train.context_order": int,
    "eval.checkpoint": str,
    "bounds.cells": list,
    "bounds.mutation": str,
}


def _check_type(path: str, default, value):
    if value is None:
        if default is None:
            return
        raise ConfigError(f"{path}: must not be null")
    want = NULLABLE_TYPES.get(path) if default is None else type(default)
    if want is None:
        return
    if want is bool:
        ok = isinstance(value, bool)
    elif want is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif want is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, want)
    if not ok:
        raise ConfigError(f"{path}: expected {want.__name__}, got {type(value).__name__} ({value!r})")


def _merge(defaults: dict, raw: dict, prefix: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(raw).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in raw.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in defaults:
            raise ConfigError(f"{path}: unknown key (allowed: {', '.join(sorted(defaults))})")
        if path == "train.gate.schedule":
            out[key] = _merge_schedule(value, path)
        elif isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, path)
        else:
            _check_type(path, defaults[key], value)
            out[key] = copy.deepcopy(value)
    return out


def _merge_schedule(raw, path: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    kind = raw.get("kind", "constant")
    if kind not in SCHEDULES:
        raise ConfigError(f"{path}.kind: unknown schedule {kind!r} (allowed: {', '.join(SCHEDULES)})")
    fields = SCHEDULES[kind]
    out = {"kind": kind}
    for key, value in raw.items():
        if key != "kind" and key not in fields:
            raise ConfigError(f"{path}.{key}: unknown key for {kind} schedule (allowed: {', '.join(fields)})")
    for key, default in fields.items():
        value = raw.get(key, default)
        if value is None:
            raise ConfigError(f"{path}.{key}: required for {kind} schedule")
        _check_type(f"{path}.{key}", 0.0, value)
        out[key] = value
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b.c=value``; the value is read as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form dotted.key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {text!r} has an empty key segment")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides or ():
        parts, value = parse_override(text)
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r}: {p} is not an object")
        node[parts[-1]] = value
    return raw


def resolve(raw: dict | None = None, overrides=None) -> dict:
    """Defaults <- file contents <- overrides, validated field by field."""
    raw = apply_overrides(raw or {}, overrides)
    schema = raw.get("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"schema: unsupported config schema {schema!r} (expected {CONFIG_SCHEMA})")
    cfg = _merge(DEFAULTS, raw, "")
    # build once so semantic errors surface before any compute
    build_method(cfg)
    build_train_config(cfg)
    if cfg["task"]["family"] not in ("lock", "chain", "file"):
        raise ConfigError(f"task.family: unknown family {cfg['task']['family']!r} (allowed: lock, chain, file)")
    if cfg["task"]["family"] == "file" and not cfg["task"]["path"]:
        raise ConfigError("task.path: required when task.family is 'file'")
    return cfg


def load_config(path=None, overrides=None) -> dict:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{p}: invalid JSON ({err})") from None
    return resolve(raw, overrides)


def dump_config(cfg: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=False) + "\n")
    return path


def _wrap(section: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError as err:
        raise ConfigError(f"{section}: {err}") from None
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{section}: {err}") from None


def build_method(cfg: dict) -> BaselineConfig:
    return _wrap("method", BaselineConfig, **cfg["method"])


def build_schedule(d: dict):
    kind = d["kind"]
    args = {k: v for k, v in d.items() if k != "kind"}
    if kind == "step":
        args["switch_step"] = int(args["switch_step"])
    return {"constant": Constant, "step": Step, "sigmoid": Sigmoid}[kind](**args)


def build_train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    gate = dict(t.pop("gate"))
    gate["schedule"] = build_schedule(gate["schedule"])
    gate["prior"] = tuple(gate["prior"])
    t["gate"] = _wrap("train.gate", GateConfig, **gate)
    t["shaping"] = _wrap("train.shaping", ShapingConfig, **t["shaping"])
    t["lr"] = _wrap("train.lr", LRSchedule, **t["lr"])
    t["adam_betas"] = tuple(t["adam_betas"])
    return _wrap("train", TrainConfig, **t)


def build_task(cfg: dict, seed: int | None = None) -> TaskSpec:
    """Construct (or load) the task; ``seed`` overrides ``task.seed``."""
    tc = cfg["task"]
    seed = tc["seed"] if seed is None else seed
    if tc["family"] == "lock":
        return _wrap("task.lock", make_lock_task, seed=seed, **tc["lock"])
    if tc["family"] == "chain":
        return _wrap("task.chain", make_chain_task, seed=seed, **tc["chain"])
    return load_task(tc["path"])


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def output_dir(cfg: dict) -> Path:
    """``output.dir`` resolved against the output-root environment variable."""
    d = Path(cfg["output"]["dir"])
    return d if d.is_absolute() else output_root() / d
