import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hapolab.env import Trajectory, make_lock_task
from hapolab.grpo import (
    Group,
    clip_surrogate,
    compute_advantages,
    grpo_batch_objective,
    normalized_advantages,
    read_groups,
    rollout_group,
    rollout_groups,
    write_groups,
)
from hapolab.policy import PolicyParams, SparseGrad, grad_logp, logp


def fill_random(params, task, rng, scale=1.0):
    for p in task.prompts:
        for t in range(task.max_len):
            for prefix in np.ndindex(*([task.vocab_size] * t)):
                params.set_logits(params.key(p, prefix), rng.normal(0, scale, task.vocab_size))
    return params


def reinforce_oracle(params, group):
    """Group-baseline REINFORCE gradient, token by token through grad_logp."""
    total = SparseGrad.zeros(params.vocab_size)
    for tr, a in zip(group.trajectories, group.advantages):
        for t, tok in enumerate(tr.tokens):
            total = total + grad_logp(params, params.key(tr.prompt, tr.tokens[:t]), tok) * a
    return total


def make_group(prompt, seqs, rewards, params=None):
    trajs = []
    for s, r in zip(seqs, rewards):
        lps = np.zeros(len(s)) if params is None else np.array(
            [logp(params, params.key(prompt, s[:t]), s[t]) for t in range(len(s))])
        trajs.append(Trajectory(prompt, s, lps, r))
    return Group(prompt, trajs)


@pytest.fixture
def task():
    return make_lock_task(4, 3, 3, 1, seed=2)


def test_advantages_example():
    adv = normalized_advantages([1, 0, 0, 0])
    # mean 0.25, population std sqrt(0.1875)
    std = math.sqrt(0.25 * 0.75)
    np.testing.assert_allclose(adv, [0.75 / std, -0.25 / std, -0.25 / std, -0.25 / std], rtol=1e-15)
    np.testing.assert_allclose(adv, [1.7321, -0.5774, -0.5774, -0.5774], atol=1e-4)


@pytest.mark.parametrize("rewards", [[0] * 8, [1] * 8, [1, 1]])
def test_degenerate_advantages_are_zero(rewards):
    assert np.all(normalized_advantages(rewards) == 0.0)


def test_sample_std_option():
    adv = normalized_advantages([1, 0, 0, 0], ddof=1)
    np.testing.assert_allclose(adv.std(ddof=1), 1.0)


@given(st.lists(st.integers(0, 1), min_size=2, max_size=64))
@settings(max_examples=300, deadline=None)
def test_advantage_normalization_property(rewards):
    adv = normalized_advantages(rewards)
    if len(set(rewards)) == 1:
        assert np.all(adv == 0)
    else:
        assert abs(adv.mean()) < 1e-9
        assert abs(adv.std() - 1.0) < 1e-9


def test_rollout_group_shapes(task):
    params = PolicyParams.for_task(task)
    g = rollout_group(params, task, 1, 8, np.random.default_rng(0))
    assert g.size == 8 and g.advantages is None and not g.injected
    assert g.success_count == sum(t.reward for t in g.trajectories)


def test_rollout_requires_two():
    task = make_lock_task(4, 1, 2, 1)
    with pytest.raises(ValueError):
        rollout_group(PolicyParams.for_task(task), task, 0, 1, np.random.default_rng(0))


def test_rollout_deterministic(task):
    params = fill_random(PolicyParams.for_task(task), task, np.random.default_rng(0))
    a = rollout_groups(params, task, [0, 1, 2], 4, np.random.default_rng(3))
    b = rollout_groups(params, task, [0, 1, 2], 4, np.random.default_rng(3))
    assert [t.tokens for g in a for t in g.trajectories] == [t.tokens for g in b for t in g.trajectories]


def test_deterministic_success_policy(task):
    params = PolicyParams.for_task(task)
    sol = next(iter(task.accepted[0]))
    for t in range(3):
        row = np.full(4, -50.0)
        row[sol[t]] = 50.0
        params.set_logits(params.key(0, sol[:t]), row)
    g = rollout_group(params, task, 0, 8, np.random.default_rng(0))
    assert g.success_count == 8


def test_sparse_task_all_fail_group():
    # P(S > 0) <= N * 16^-6 ~ 4.8e-7 per group
    task = make_lock_task(16, 1, 6, 1, seed=0)
    params = PolicyParams.for_task(task)
    rng = np.random.default_rng(0)
    assert all(rollout_group(params, task, 0, 8, rng).success_count == 0 for _ in range(20))


def test_surrogate_at_ratio_one(task):
    params = fill_random(PolicyParams.for_task(task), task, np.random.default_rng(1))
    seqs = [(0, 1, 2), (3, 3, 3), (1, 0, 2), (2, 2, 1)]
    g = compute_advantages(make_group(0, seqs, [1, 0, 0, 1], params))
    obj, grad = clip_surrogate(params, None, g)
    assert obj == pytest.approx(sum(a * 3 for a in g.advantages), abs=1e-12)
    assert grad.allclose(reinforce_oracle(params, g), atol=1e-12)


def test_single_token_clip_example():
    task = make_lock_task(4, 1, 1, 1, seed=0)
    params = PolicyParams.for_task(task)
    tr = Trajectory(0, (1,), np.array([math.log(0.25) - math.log(0.5)]), 1)
    g = Group(0, [tr, Trajectory(0, (2,), np.array([math.log(0.25)]), 0)])
    g.advantages = np.array([1.0, 0.0])
    obj, _ = clip_surrogate(params, None, g, eps_clip=0.2)
    # r = 0.5 for the first token, min(0.5 * 1, 0.8 * 1) = 0.5
    assert obj == pytest.approx(0.5, abs=1e-12)


def test_binding_clip_zeroes_gradient():
    task = make_lock_task(4, 1, 1, 1, seed=0)
    params = PolicyParams.for_task(task)
    # old prob 0.1, new prob 0.25 -> r = 2.5 > 1.2 with A > 0
    tr = Trajectory(0, (1,), np.array([math.log(0.1)]), 1)
    g = Group(0, [tr, Trajectory(0, (1,), np.array([math.log(0.1)]), 1)])
    g.advantages = np.array([1.0, 1.0])
    obj, grad = clip_surrogate(params, None, g, eps_clip=0.2)
    assert obj == pytest.approx(2 * 1.2)
    assert grad.norm() == 0.0
    # A < 0 with r > 1 + eps stays on the unclipped branch
    g.advantages = np.array([-1.0, -1.0])
    obj, grad = clip_surrogate(params, None, g, eps_clip=0.2)
    assert obj == pytest.approx(-2 * 2.5)
    assert grad.norm() > 0


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.05, 0.5))
@settings(max_examples=200, deadline=None)
def test_clipping_never_increases_magnitude(log_ratio, adv, eps):
    task = make_lock_task(3, 1, 1, 1, seed=0)
    params = PolicyParams.for_task(task)
    old = math.log(1 / 3) - log_ratio
    g = Group(0, [Trajectory(0, (0,), np.array([old]), 0), Trajectory(0, (1,), np.array([old]), 0)])
    g.advantages = np.array([adv, 0.0])
    obj, _ = clip_surrogate(params, None, g, eps_clip=eps)
    unclipped = math.exp(log_ratio) * adv
    # pessimistic bound; magnitude only shrinks for non-negative advantages
    assert obj <= unclipped + 1e-12
    if adv >= 0:
        assert abs(obj) <= abs(unclipped) + 1e-12


def test_degenerate_group_zero_gradient(task):
    params = fill_random(PolicyParams.for_task(task), task, np.random.default_rng(2))
    g = compute_advantages(make_group(0, [(0, 1, 2), (3, 2, 1), (1, 1, 1)], [0, 0, 0], params))
    obj, grad = clip_surrogate(params, None, g)
    assert obj == 0.0 and np.all(grad.values == 0.0)


def test_length_mismatch(task):
    params = PolicyParams.for_task(task)
    g = compute_advantages(make_group(0, [(0, 1, 2), (3, 2, 1)], [1, 0], params))
    with pytest.raises(ValueError):
        clip_surrogate(params, [np.zeros(3), np.zeros(2)], g)


def test_batch_objective_is_token_normalized(task):
    params = fill_random(PolicyParams.for_task(task), task, np.random.default_rng(3))
    groups = [compute_advantages(make_group(p, [(0, 1, 2), (3, 3, 3), (1, 0, 2)], r, params))
              for p, r in [(0, [1, 0, 0]), (1, [0, 1, 1])]]
    obj, grad = grpo_batch_objective(params, None, groups)
    parts = [clip_surrogate(params, None, g) for g in groups]
    assert obj == pytest.approx(sum(o for o, _ in parts) / 18, abs=1e-14)
    assert grad.allclose((parts[0][1] + parts[1][1]) / 18, atol=1e-15)


def test_group_stream_roundtrip(tmp_path, task):
    params = fill_random(PolicyParams.for_task(task), task, np.random.default_rng(4))
    groups = [compute_advantages(g) for g in rollout_groups(params, task, [0, 1], 4, np.random.default_rng(0))]
    path = tmp_path / "groups.jsonl"
    with open(path, "w") as fh:
        write_groups(groups, fh, step=3)
    with open(path) as fh:
        back = read_groups(fh)
    assert [s for s, _ in back] == [3, 3]
    for (_, b), a in zip(back, groups):
        assert [t.tokens for t in b.trajectories] == [t.tokens for t in a.trajectories]
        np.testing.assert_array_equal(b.advantages, a.advantages)


def test_teacher_only_after_injection():
    demo = Trajectory(0, (1,), np.empty(0), 1, is_teacher=True)
    with pytest.raises(ValueError):
        Group(0, [demo, Trajectory(0, (0,), np.zeros(1), 0)])
