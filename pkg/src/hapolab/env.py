"""Synthetic verifiable token-generation tasks.

Two families are provided:

* lock tasks: every prompt has a small set of fixed-length accepted
  sequences, so a uniform policy almost never succeeds;
* chain tasks: digits must add up to a prompt-specific target and the
  sequence is closed by an end-of-sequence token, which gives variable
  generation lengths.

Rewards are binary and terminal. Each prompt carries one teacher
demonstration; with several accepted sequences the teacher always shows the
same one, which makes it deliberately suboptimal in the distributional sense.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, InfeasibleTaskError

TASK_SCHEMA = "hapolab.task/1"

Tokens = tuple[int, ...]


@dataclass(frozen=True, eq=False)
class TaskSpec:
    vocab_size: int
    prompts: tuple[int, ...]
    max_len: int
    accepted: Mapping[int, frozenset[Tokens]]
    teacher_demos: Mapping[int, Tokens]
    eos: int | None = None
    verified_teacher: bool = True
    name: str = "custom"
    _prompt_index: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")
        if len(set(self.prompts)) != len(self.prompts) or not self.prompts:
            raise ConfigError("prompts must be a non-empty list of distinct ids")
        if self.eos is not None and not 0 <= self.eos < self.vocab_size:
            raise ConfigError(f"eos token {self.eos} outside vocabulary")
        object.__setattr__(self, "prompts", tuple(int(p) for p in self.prompts))
        object.__setattr__(
            self, "accepted",
            {int(p): frozenset(tuple(int(t) for t in s) for s in seqs)
             for p, seqs in self.accepted.items()},
        )
        object.__setattr__(
            self, "teacher_demos",
            {int(p): tuple(int(t) for t in s) for p, s in self.teacher_demos.items()},
        )
        object.__setattr__(self, "_prompt_index", {p: i for i, p in enumerate(self.prompts)})

        for p in self.prompts:
            seqs = self.accepted.get(p)
            if not seqs:
                raise ConfigError(f"prompt {p} has no accepted sequences")
            for s in seqs:
                self._check_sequence(p, s)
        for p, demo in self.teacher_demos.items():
            if p not in self._prompt_index:
                raise ConfigError(f"teacher demo for unknown prompt {p}")
            self._check_sequence(p, demo)
            if self.verified_teacher and demo not in self.accepted[p]:
                raise ConfigError(
                    f"teacher demo for prompt {p} is not accepted; "
                    "build the task with verified_teacher=False for that ablation"
                )

    def _check_sequence(self, prompt, seq):
        if not seq or len(seq) > self.max_len:
            raise ConfigError(f"prompt {prompt}: sequence {seq} has length outside [1, {self.max_len}]")
        if any(not 0 <= t < self.vocab_size for t in seq):
            raise ConfigError(f"prompt {prompt}: sequence {seq} has tokens outside the vocabulary")
        if self.eos is not None:
            body = seq[:-1] if seq[-1] == self.eos else seq
            if self.eos in body:
                raise ConfigError(f"prompt {prompt}: eos inside sequence {seq}")
            if seq[-1] != self.eos and len(seq) != self.max_len:
                raise ConfigError(f"prompt {prompt}: unterminated sequence {seq} shorter than max_len")
        elif len(seq) != self.max_len:
            raise ConfigError(f"prompt {prompt}: fixed-length task needs length {self.max_len}, got {seq}")

    def prompt_index(self, prompt: int) -> int:
        try:
            return self._prompt_index[prompt]
        except KeyError:
            raise ValueError(f"unknown prompt id {prompt}") from None

    def __eq__(self, other):
        if not isinstance(other, TaskSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "schema": TASK_SCHEMA,
            "name": self.name,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "eos": self.eos,
            "verified_teacher": self.verified_teacher,
            "prompts": list(self.prompts),
            "accepted": {str(p): sorted(list(s) for s in self.accepted[p]) for p in self.prompts},
            "teacher_demos": {str(p): list(d) for p, d in sorted(self.teacher_demos.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TaskSpec":
        if data.get("schema") != TASK_SCHEMA:
            raise ConfigError(f"unsupported task schema {data.get('schema')!r}, expected {TASK_SCHEMA}")
        return cls(
            vocab_size=int(data["vocab_size"]),
            prompts=tuple(data["prompts"]),
            max_len=int(data["max_len"]),
            accepted={int(p): frozenset(map(tuple, s)) for p, s in data["accepted"].items()},
            teacher_demos={int(p): tuple(d) for p, d in data["teacher_demos"].items()},
            eos=data.get("eos"),
            verified_teacher=bool(data.get("verified_teacher", True)),
            name=data.get("name", "custom"),
        )


@dataclass(eq=False)
class Trajectory:
    """One sampled (or injected) response to a prompt."""

    prompt: int
    tokens: Tokens
    behavior_logps: np.ndarray
    reward: int
    is_teacher: bool = False

    def __post_init__(self):
        self.tokens = tuple(int(t) for t in self.tokens)
        self.behavior_logps = np.asarray(self.behavior_logps, dtype=np.float64)
        if self.reward not in (0, 1):
            raise ValueError(f"reward must be 0 or 1, got {self.reward}")
        if not self.is_teacher and len(self.tokens) != len(self.behavior_logps):
            raise ValueError("behavior_logps must have one entry per token")

    def __len__(self):
        return len(self.tokens)


def verify(task: TaskSpec, prompt: int, tokens: Sequence[int]) -> int:
    """Binary reward: 1 iff ``tokens`` is an accepted answer for ``prompt``."""
    task.prompt_index(prompt)
    return int(tuple(int(t) for t in tokens) in task.accepted[prompt])


def teacher_demo(task: TaskSpec, prompt: int) -> Trajectory:
    task.prompt_index(prompt)
    try:
        demo = task.teacher_demos[prompt]
    except KeyError:
        raise ConfigError(f"no teacher demonstration registered for prompt {prompt}") from None
    return Trajectory(
        prompt=prompt,
        tokens=demo,
        behavior_logps=np.empty(0),
        reward=verify(task, prompt, demo),
        is_teacher=True,
    )


def non_teacher_solutions(task: TaskSpec, prompt: int) -> list[Tokens]:
    demo = task.teacher_demos.get(prompt)
    return sorted(s for s in task.accepted[prompt] if s != demo)


def make_lock_task(
    vocab_size: int,
    n_prompts: int,
    seq_len: int,
    n_solutions_per_prompt: int = 1,
    seed: int = 0,
    verified_teacher: bool = True,
) -> TaskSpec:
    """Fixed-length combination-lock task.

    Each prompt accepts ``n_solutions_per_prompt`` distinct random sequences;
    the teacher demonstrates the first one. With ``verified_teacher=False``
    the teacher demonstrates a sequence that is *not* accepted.
    """
    if vocab_size < 2 or seq_len < 1 or n_solutions_per_prompt < 1 or n_prompts < 1:
        raise ConfigError("lock task needs vocab_size >= 2, seq_len >= 1, n_solutions >= 1, n_prompts >= 1")
    space = vocab_size ** seq_len
    n_draw = n_solutions_per_prompt + (0 if verified_teacher else 1)
    if n_draw > space:
        raise InfeasibleTaskError(
            f"{n_solutions_per_prompt} solutions requested but only {space} sequences exist"
        )
    rng = np.random.default_rng(seed)
    accepted, demos = {}, {}
    for p in range(n_prompts):
        codes = _distinct_codes(rng, space, n_draw)
        seqs = [_decode(int(c), vocab_size, seq_len) for c in codes]
        if verified_teacher:
            accepted[p] = frozenset(seqs)
            demos[p] = seqs[0]
        else:
            accepted[p] = frozenset(seqs[1:])
            demos[p] = seqs[0]
    return TaskSpec(
        vocab_size=vocab_size,
        prompts=tuple(range(n_prompts)),
        max_len=seq_len,
        accepted=accepted,
        teacher_demos=demos,
        verified_teacher=verified_teacher,
        name=f"lock-v{vocab_size}-l{seq_len}-s{n_solutions_per_prompt}",
    )


def make_chain_task(
    n_prompts: int,
    max_digit: int = 3,
    min_target: int = 3,
    max_target: int = 6,
    seed: int = 0,
) -> TaskSpec:
    """Variable-length arithmetic-chain task.

    Token 0 is end-of-sequence, tokens ``1..max_digit`` are digits. Prompt
    ``p`` accepts every digit string summing to its target followed by EOS.
    The teacher always writes the target with as many ones as possible
    (the longest solution), one fixed choice among many.
    """
    if max_digit < 1 or not 1 <= min_target <= max_target or n_prompts < 1:
        raise ConfigError("chain task needs max_digit >= 1 and 1 <= min_target <= max_target")
    rng = np.random.default_rng(seed)
    targets = rng.integers(min_target, max_target + 1, size=n_prompts)
    max_len = max_target + 1
    accepted, demos = {}, {}
    for p, target in enumerate(targets):
        sols = [tuple(c) + (0,) for c in _compositions(int(target), max_digit)]
        accepted[p] = frozenset(sols)
        demos[p] = (1,) * int(target) + (0,)
    return TaskSpec(
        vocab_size=max_digit + 1,
        prompts=tuple(range(n_prompts)),
        max_len=max_len,
        accepted=accepted,
        teacher_demos=demos,
        eos=0,
        name=f"chain-d{max_digit}-t{min_target}_{max_target}",
    )


def save_task(task: TaskSpec, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(task.to_dict(), indent=1) + "\n")
    return path


def load_task(path) -> TaskSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"task file not found: {path}")
    return TaskSpec.from_dict(json.loads(path.read_text()))


def _distinct_codes(rng, space, n):
    if space <= 1 << 20:
        return rng.choice(space, size=n, replace=False)
    seen: list[int] = []
    while len(seen) < n:
        c = int(rng.integers(space))
        if c not in seen:
            seen.append(c)
    return seen


def _decode(code, base, length):
    out = []
    for _ in range(length):
        code, r = divmod(code, base)
        out.append(r)
    return tuple(reversed(out))


def _compositions(total, max_part):
    if total == 0:
        yield ()
        return
    for part in range(1, min(max_part, total) + 1):
        for rest in _compositions(total - part, max_part):
            yield (part,) + rest
