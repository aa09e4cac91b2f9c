import math

import numpy as np
import pytest

from hapolab.env import (
    TaskSpec,
    load_task,
    make_chain_task,
    make_lock_task,
    save_task,
    teacher_demo,
    verify,
)
from hapolab.exceptions import ConfigError, InfeasibleTaskError
from hapolab.policy import PolicyParams, sample_tokens


def lock(accepted, demo=None, vocab=8, **kw):
    length = len(next(iter(accepted)))
    return TaskSpec(vocab, (0,), length, {0: frozenset(accepted)}, {0: demo or next(iter(accepted))}, **kw)


def test_verify_exact_match():
    task = lock({(2, 5, 1)})
    assert verify(task, 0, [2, 5, 1]) == 1
    assert verify(task, 0, [2, 5, 0]) == 0


def test_verify_two_solutions_matches_set_membership():
    task = lock({(1, 1), (3, 3)}, vocab=4)
    accepted = {s for s in np.ndindex(4, 4) if s in {(1, 1), (3, 3)}}
    for seq in np.ndindex(4, 4):
        assert verify(task, 0, seq) == int(seq in accepted)
    assert verify(task, 0, [3, 3]) == 1


def test_verify_unknown_prompt():
    with pytest.raises(ValueError):
        verify(lock({(1,)}), 7, [1])


def test_teacher_demo_is_verified():
    task = lock({(2, 5, 1)})
    demo = teacher_demo(task, 0)
    assert demo.tokens == (2, 5, 1) and demo.reward == 1 and demo.is_teacher
    assert demo.behavior_logps.size == 0


def test_teacher_demo_suboptimal_teacher_still_rewarded():
    task = make_lock_task(4, 3, 3, n_solutions_per_prompt=2, seed=1)
    for p in task.prompts:
        assert len(task.accepted[p]) == 2
        assert teacher_demo(task, p).reward == 1


def test_unverified_teacher_mode():
    task = make_lock_task(4, 3, 2, n_solutions_per_prompt=1, seed=0, verified_teacher=False)
    assert not task.verified_teacher
    for p in task.prompts:
        assert teacher_demo(task, p).reward == 0
    with pytest.raises(ConfigError):
        lock({(1, 1)}, demo=(2, 2), vocab=4)


def test_missing_demo_is_config_error():
    task = TaskSpec(4, (0, 1), 1, {0: frozenset({(1,)}), 1: frozenset({(2,)})}, {0: (1,)})
    with pytest.raises(ConfigError):
        teacher_demo(task, 1)


def test_task_invariants_rejected():
    with pytest.raises(ConfigError):
        TaskSpec(4, (0,), 2, {0: frozenset()}, {})
    with pytest.raises(ConfigError):
        TaskSpec(4, (0,), 2, {0: frozenset({(1, 9)})}, {})


def test_lock_task_counts():
    task = make_lock_task(8, 5, 4, 1, seed=3)
    assert task.max_len == 4 and len(task.prompts) == 5
    assert all(len(task.accepted[p]) == 1 for p in task.prompts)
    assert math.isclose(1 / 8**4, 2.44140625e-4)


def test_lock_task_full_coverage():
    task = make_lock_task(2, 1, 1, n_solutions_per_prompt=2, seed=0)
    assert task.accepted[0] == {(0,), (1,)}


def test_lock_task_deterministic():
    assert make_lock_task(8, 4, 4, 2, seed=11) == make_lock_task(8, 4, 4, 2, seed=11)
    assert make_lock_task(8, 4, 4, 2, seed=11) != make_lock_task(8, 4, 4, 2, seed=12)


def test_lock_task_infeasible():
    with pytest.raises(InfeasibleTaskError):
        make_lock_task(2, 1, 2, n_solutions_per_prompt=5)


def test_lock_task_large_space():
    task = make_lock_task(16, 2, 6, 1, seed=0)
    assert all(len(s) == 6 for p in task.prompts for s in task.accepted[p])


def test_uniform_success_rate_matches_counting():
    # 3 standard errors over 10^5 uniform samples
    task = make_lock_task(4, 1, 3, n_solutions_per_prompt=2, seed=5)
    params = PolicyParams.for_task(task)
    n = 100_000
    toks, _, lens = sample_tokens(params, task, [0] * n, np.random.default_rng(0))
    hits = np.mean([tuple(row) in task.accepted[0] for row in toks.tolist()])
    p = 2 / 4**3
    assert abs(hits - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_chain_task():
    task = make_chain_task(4, max_digit=3, min_target=3, max_target=5, seed=2)
    assert task.eos == 0
    for p in task.prompts:
        assert teacher_demo(task, p).reward == 1
        for s in task.accepted[p]:
            assert s[-1] == 0 and sum(s) == len(task.teacher_demos[p]) - 1


def test_task_roundtrip(tmp_path):
    for task in (make_lock_task(5, 3, 3, 2, seed=4), make_chain_task(3, seed=1)):
        path = save_task(task, tmp_path / "task.json")
        assert load_task(path) == task


def test_load_missing_task(tmp_path):
    with pytest.raises(ConfigError):
        load_task(tmp_path / "nope.json")
