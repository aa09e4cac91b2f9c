"""Tabular autoregressive softmax policy.

The policy conditions the next-token distribution on a context key
``(prompt, position, last k tokens)``. Every key is packed into one integer
code so that batches of contexts can be looked up with numpy. Rows of the
logit table are created lazily on first write; an untouched context has all
logits at zero, i.e. the uniform distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .env import TaskSpec, Trajectory, verify
from .exceptions import ConfigError

DEFAULT_MAX_FULL_CONTEXT = 6
DEFAULT_TRUNCATED_ORDER = 4


@dataclass(frozen=True)
class ContextKey:
    prompt: int
    position: int
    suffix: tuple[int, ...] = ()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class SparseGrad:
    """Gradient over the logit table, stored only for touched contexts.

    ``codes`` is sorted and unique; ``values[i]`` is the gradient row for
    ``codes[i]``.
    """

    __slots__ = ("codes", "values")

    def __init__(self, codes: np.ndarray, values: np.ndarray):
        self.codes = np.asarray(codes, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)

    @classmethod
    def zeros(cls, vocab_size: int) -> "SparseGrad":
        return cls(np.empty(0, dtype=np.int64), np.empty((0, vocab_size)))

    @classmethod
    def from_rows(cls, codes: np.ndarray, rows: np.ndarray) -> "SparseGrad":
        """Sum per-token gradient rows that may share a context code."""
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size == 0:
            return cls.zeros(rows.shape[-1])
        uniq, inv = np.unique(codes, return_inverse=True)
        values = np.zeros((uniq.size, rows.shape[-1]))
        np.add.at(values, inv, rows)
        return cls(uniq, values)

    @property
    def vocab_size(self) -> int:
        return self.values.shape[1]

    def __add__(self, other: "SparseGrad") -> "SparseGrad":
        if other.codes.size == 0:
            return SparseGrad(self.codes.copy(), self.values.copy())
        if self.codes.size == 0:
            return SparseGrad(other.codes.copy(), other.values.copy())
        return SparseGrad.from_rows(
            np.concatenate([self.codes, other.codes]),
            np.concatenate([self.values, other.values]),
        )

    def __mul__(self, scale: float) -> "SparseGrad":
        return SparseGrad(self.codes.copy(), self.values * scale)

    __rmul__ = __mul__

    def __neg__(self) -> "SparseGrad":
        return SparseGrad(self.codes.copy(), -self.values)

    def __sub__(self, other: "SparseGrad") -> "SparseGrad":
        return self + (-other)

    def __truediv__(self, denom: float) -> "SparseGrad":
        return SparseGrad(self.codes.copy(), self.values / denom)

    def dot(self, other: "SparseGrad") -> float:
        common, i, j = np.intersect1d(self.codes, other.codes, assume_unique=True, return_indices=True)
        if common.size == 0:
            return 0.0
        return float(np.sum(self.values[i] * other.values[j]))

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.values**2)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def row(self, code: int) -> np.ndarray:
        k = np.searchsorted(self.codes, code)
        if k < self.codes.size and self.codes[k] == code:
            return self.values[k]
        return np.zeros(self.vocab_size)

    def allclose(self, other: "SparseGrad", atol: float = 0.0) -> bool:
        both = np.union1d(self.codes, other.codes)
        a = np.array([self.row(c) for c in both]).reshape(-1, self.vocab_size)
        b = np.array([other.row(c) for c in both]).reshape(-1, self.vocab_size)
        return bool(np.all(np.abs(a - b) <= atol))

    def __repr__(self):
        return f"SparseGrad(contexts={self.codes.size}, norm={self.norm():.3g})"


def cosine(a: SparseGrad, b: SparseGrad) -> float:
    """Cosine similarity; two identical gradients (including two zeros) give 1."""
    if a.codes.shape == b.codes.shape and np.array_equal(a.codes, b.codes) and np.array_equal(a.values, b.values):
        return 1.0
    na, nb = a.norm(), b.norm()
    if na == 0.0 or nb == 0.0:
        return 0.0
    return a.dot(b) / (na * nb)


class PolicyParams:
    """Logit table theta, keyed by packed context codes.

    ``context_order`` is the number of previous tokens in the key. ``None``
    selects the full prefix for horizons up to 6 and 4 tokens beyond that.
    """

    def __init__(self, vocab_size: int, max_len: int, prompts: Sequence[int], context_order: int | None = None):
        if context_order is None:
            context_order = max_len if max_len <= DEFAULT_MAX_FULL_CONTEXT else DEFAULT_TRUNCATED_ORDER
        if context_order < 0:
            raise ConfigError("context_order must be >= 0")
        self.vocab_size = int(vocab_size)
        self.max_len = int(max_len)
        self.prompts = tuple(int(p) for p in prompts)
        self.context_order = int(min(context_order, max_len))
        self._prompt_index = {p: i for i, p in enumerate(self.prompts)}
        self._radix = self.vocab_size ** self.context_order
        if len(self.prompts) * self.max_len * self._radix >= 2**62:
            raise ConfigError("context space too large to pack into int64; lower context_order")
        self._index: dict[int, int] = {}
        self._logits = np.zeros((64, self.vocab_size))
        self._n = 0

    @classmethod
    def for_task(cls, task: TaskSpec, context_order: int | None = None) -> "PolicyParams":
        return cls(task.vocab_size, task.max_len, task.prompts, context_order)

    # -- context codes -----------------------------------------------------

    def encode(self, key: ContextKey) -> int:
        if not 0 <= key.position < self.max_len:
            raise ValueError(f"position {key.position} outside horizon {self.max_len}")
        width = min(self.context_order, key.position)
        suffix = tuple(key.suffix)[-width:] if width else ()
        if len(suffix) != width:
            raise ValueError(f"context at position {key.position} needs {width} suffix tokens, got {key.suffix}")
        enc = 0
        for t in suffix:
            enc = enc * self.vocab_size + int(t)
        pidx = self._prompt_index[key.prompt]
        return (pidx * self.max_len + key.position) * self._radix + enc

    def decode(self, code: int) -> ContextKey:
        head, enc = divmod(int(code), self._radix)
        pidx, position = divmod(head, self.max_len)
        width = min(self.context_order, position)
        suffix = []
        for _ in range(width):
            enc, r = divmod(enc, self.vocab_size)
            suffix.append(r)
        return ContextKey(self.prompts[pidx], position, tuple(reversed(suffix)))

    def key(self, prompt: int, prefix: Sequence[int]) -> ContextKey:
        """Context key for generating the token after ``prefix``."""
        t = len(prefix)
        width = min(self.context_order, t)
        return ContextKey(prompt, t, tuple(prefix[t - width:]) if width else ())

    def batch_codes(self, prompt_idx: np.ndarray, position: int, prefix: np.ndarray) -> np.ndarray:
        """Codes for column ``position`` of a padded token matrix.

        ``prefix`` holds at least ``position`` columns; only the last
        ``context_order`` of them enter the key.
        """
        width = min(self.context_order, position)
        base = (np.asarray(prompt_idx, dtype=np.int64) * self.max_len + position) * self._radix
        if width == 0:
            return base
        suffix = np.asarray(prefix[:, position - width:position], dtype=np.int64)
        weights = self.vocab_size ** np.arange(width - 1, -1, -1, dtype=np.int64)
        return base + suffix @ weights

    def prompt_indices(self, prompts: Iterable[int]) -> np.ndarray:
        return np.array([self._prompt_index[p] for p in prompts], dtype=np.int64)

    # -- table access ------------------------------------------------------

    def rows(self, codes: np.ndarray, create: bool = False) -> np.ndarray:
        index = self._index
        if not create:
            return np.fromiter((index.get(c, -1) for c in codes.tolist()), dtype=np.int64, count=len(codes))
        out = np.empty(len(codes), dtype=np.int64)
        for i, c in enumerate(codes.tolist()):
            r = index.get(c)
            if r is None:
                r = self._new_row(c)
            out[i] = r
        return out

    def _new_row(self, code: int) -> int:
        if self._n == self._logits.shape[0]:
            grown = np.zeros((2 * self._logits.shape[0], self.vocab_size))
            grown[: self._n] = self._logits[: self._n]
            self._logits = grown
        self._index[code] = self._n
        self._n += 1
        return self._n - 1

    def logits(self, codes: np.ndarray) -> np.ndarray:
        rows = self.rows(np.asarray(codes, dtype=np.int64))
        out = np.zeros((len(rows), self.vocab_size))
        hit = rows >= 0
        out[hit] = self._logits[rows[hit]]
        return out

    def set_logits(self, key: ContextKey | int, values) -> None:
        code = key if isinstance(key, (int, np.integer)) else self.encode(key)
        row = self.rows(np.array([code], dtype=np.int64), create=True)[0]
        self._logits[row] = values

    def set_rows(self, codes: np.ndarray, values: np.ndarray) -> None:
        # rows() may grow the table, so resolve it before indexing
        rows = self.rows(np.asarray(codes, dtype=np.int64), create=True)
        self._logits[rows] = values

    def add(self, grad: SparseGrad, scale: float = 1.0) -> None:
        if grad.codes.size == 0:
            return
        rows = self.rows(grad.codes, create=True)
        self._logits[rows] += scale * grad.values

    def copy(self) -> "PolicyParams":
        new = PolicyParams.__new__(PolicyParams)
        new.__dict__.update(self.__dict__)
        new._index = dict(self._index)
        new._logits = self._logits.copy()
        return new

    def __len__(self):
        return self._n

    def items(self) -> tuple[np.ndarray, np.ndarray]:
        """(codes, logits) of all materialized rows, in creation order."""
        codes = np.fromiter(self._index.keys(), dtype=np.int64, count=self._n)
        return codes, self._logits[: self._n].copy()

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self._logits[: self._n])))

    def state_equal(self, other: "PolicyParams") -> bool:
        if self._index != other._index:
            return False
        return bool(np.array_equal(self._logits[: self._n], other._logits[: other._n]))

    # -- serialization -----------------------------------------------------

    def meta(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "prompts": list(self.prompts),
            "context_order": self.context_order,
        }

    def save(self, path) -> Path:
        """Binary checkpoint: packed codes, logit rows and the key layout."""
        path = Path(path)
        codes, logits = self.items()
        with open(path, "wb") as fh:
            np.savez(fh, codes=codes, logits=logits, meta=np.array(json.dumps(self.meta())))
        return path

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with np.load(Path(path)) as data:
            meta = json.loads(str(data["meta"]))
            params = cls(meta["vocab_size"], meta["max_len"], meta["prompts"], meta["context_order"])
            params._restore(data["codes"], data["logits"])
        return params

    def _restore(self, codes, logits):
        self._index = {}
        self._n = 0
        self._logits = np.zeros((max(64, len(codes)), self.vocab_size))
        for c in codes.tolist():
            self._new_row(c)
        self._logits[: self._n] = logits

    def save_text(self, path) -> Path:
        """Flat text table: prompt, position, suffix, token, logit."""
        path = Path(path)
        codes, logits = self.items()
        lines = ["prompt\tposition\tsuffix\ttoken\tlogit"]
        for code, row in zip(codes.tolist(), logits):
            key = self.decode(code)
            suffix = ",".join(map(str, key.suffix))
            lines += [f"{key.prompt}\t{key.position}\t{suffix}\t{v}\t{row[v]!r}" for v in range(self.vocab_size)]
        path.write_text("\n".join(lines) + "\n")
        return path


def logp(params: PolicyParams, context: ContextKey, token: int) -> float:
    if not 0 <= token < params.vocab_size:
        raise ValueError(f"token {token} outside vocabulary")
    row = params.logits(np.array([params.encode(context)]))
    return float(log_softmax(row)[0, token])


def grad_logp(params: PolicyParams, context: ContextKey, token: int) -> SparseGrad:
    """d logp / d logits[context, v] = 1{v == token} - softmax[v]."""
    if not 0 <= token < params.vocab_size:
        raise ValueError(f"token {token} outside vocabulary")
    code = params.encode(context)
    g = -softmax(params.logits(np.array([code])))
    g[0, token] += 1.0
    return SparseGrad(np.array([code]), g)


def sample_tokens(
    params: PolicyParams,
    task: TaskSpec,
    prompts: Sequence[int],
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample one response per entry of ``prompts`` in a single vectorized pass.

    Returns ``(tokens, logps, lengths)``: a ``(B, max_len)`` token matrix padded
    with -1, per-token log-probabilities under the sampling distribution, and
    response lengths. Generation stops after the task's EOS token, if any.
    One uniform draw per (row, position) is consumed whether or not the row
    is still alive, so the rng stream depends only on batch shape.
    """
    pidx = params.prompt_indices(prompts)
    b, horizon = len(pidx), task.max_len
    tokens = np.full((b, horizon), -1, dtype=np.int64)
    logps = np.zeros((b, horizon))
    alive = np.ones(b, dtype=bool)
    lengths = np.zeros(b, dtype=np.int64)
    for t in range(horizon):
        u = rng.random(b)
        if not alive.any():
            continue
        rows = np.flatnonzero(alive)
        logits = params.logits(params.batch_codes(pidx[rows], t, tokens[rows]))
        if temperature == 0:
            tok = logits.argmax(axis=1)
            lp = np.zeros(len(rows))
        else:
            lps = log_softmax(logits / temperature)
            cdf = np.cumsum(np.exp(lps), axis=1)
            tok = np.minimum((cdf < (u[rows] * cdf[:, -1])[:, None]).sum(axis=1), params.vocab_size - 1)
            lp = lps[np.arange(len(rows)), tok]
        tokens[rows, t] = tok
        logps[rows, t] = lp
        lengths[rows] += 1
        if task.eos is not None:
            alive[rows[tok == task.eos]] = False
    return tokens, logps, lengths


def sample_trajectories(params, task, prompts, rng, temperature=1.0) -> list[Trajectory]:
    tokens, logps, lengths = sample_tokens(params, task, prompts, rng, temperature)
    out = []
    for prompt, row, lp, n in zip(prompts, tokens, logps, lengths):
        seq = tuple(row[:n].tolist())
        out.append(Trajectory(prompt, seq, lp[:n].copy(), verify(task, prompt, seq)))
    return out


def sample_trajectory(params: PolicyParams, task: TaskSpec, prompt: int, rng: np.random.Generator,
                      temperature: float = 1.0) -> Trajectory:
    task.prompt_index(prompt)
    return sample_trajectories(params, task, [prompt], rng, temperature)[0]


def token_contexts(params: PolicyParams, trajectories: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flatten trajectories into per-token ``(codes, tokens, owner)`` arrays.

    Tokens appear trajectory-major; ``owner[k]`` is the index of the trajectory
    that token ``k`` belongs to.
    """
    n = len(trajectories)
    if n == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty
    lengths = np.array([len(tr.tokens) for tr in trajectories], dtype=np.int64)
    horizon = int(lengths.max())
    mat = np.zeros((n, horizon), dtype=np.int64)
    for i, tr in enumerate(trajectories):
        mat[i, : lengths[i]] = tr.tokens
    pidx = params.prompt_indices(tr.prompt for tr in trajectories)
    codes = np.stack([params.batch_codes(pidx, t, mat) for t in range(horizon)], axis=1)
    mask = np.arange(horizon)[None, :] < lengths[:, None]
    owner = np.broadcast_to(np.arange(n)[:, None], (n, horizon))
    return codes[mask], mat[mask], owner[mask]


def sequence_logp(params: PolicyParams, prompt: int, tokens: Sequence[int], temperature: float = 1.0) -> float:
    """Exact log-probability of emitting ``tokens`` for ``prompt``."""
    if len(tokens) == 0:
        return 0.0
    traj = Trajectory(prompt, tokens, np.zeros(len(tokens)), 0)
    codes, toks, _ = token_contexts(params, [traj])
    lps = log_softmax(params.logits(codes) / temperature)
    return float(lps[np.arange(len(toks)), toks].sum())
