"""Per-step metrics, raw trajectory logs, and checks on the gate's behavior."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import RegimeError
from .gating import confidence, exact_open_probability, gate_threshold_count, hoeffding_bound
from .policy import cosine

METRICS_SCHEMA = "hapolab.metrics/1"
TRAJECTORY_SCHEMA = "hapolab.trajectories/1"


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    mean_gen_length: float
    teacher_injection_count: int
    mean_confidence: float
    threshold: float
    grad_norm: float
    objective_value: float
    lr: float = 0.0
    phase: str = "rl"
    n_groups: int = 0
    n_degenerate: int = 0
    teacher_token_share: float = 0.0
    mean_abs_advantage: float = 0.0
    clip_fraction: float = 0.0
    consistency_cosine: float = float("nan")

    def __post_init__(self):
        if self.n_groups and not 0 <= self.teacher_injection_count <= self.n_groups:
            raise ValueError("teacher_injection_count outside [0, n_groups]")
        if not 0.0 <= self.mean_reward <= 1.0:
            raise ValueError(f"mean_reward {self.mean_reward} outside [0, 1]")


METRIC_COLUMNS = [f.name for f in fields(StepMetrics)]


@dataclass
class RunMetrics:
    method: str
    seed: int
    records: list[StepMetrics] = field(default_factory=list)
    params: object = None
    state: object = None
    output_dir: Path | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def max_grad_norm(self) -> float:
        return float(np.max(self.column("grad_norm"))) if self.records else 0.0

    def __len__(self):
        return len(self.records)


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


class MetricsWriter:
    """Append-only CSV sink; the first line names the schema version."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "w" if fresh else "a", newline="")
        if fresh:
            self._fh.write(f"# {METRICS_SCHEMA}\n")
            self._fh.write(",".join(METRIC_COLUMNS) + "\n")
            self._fh.flush()

    def write(self, rec: StepMetrics) -> None:
        self._fh.write(",".join(_fmt(getattr(rec, c)) for c in METRIC_COLUMNS) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics_csv(path) -> list[StepMetrics]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# {METRICS_SCHEMA}":
            raise ValueError(f"{path}: unexpected schema line {first!r}")
        out = []
        for row in csv.DictReader(fh):
            kw = {}
            for f in fields(StepMetrics):
                raw = row[f.name]
                kw[f.name] = int(raw) if f.type in ("int", int) else raw if f.type in ("str", str) else float(raw)
            out.append(StepMetrics(**kw))
    return out


class TrajectoryLog:
    """Optional JSONL dump of every group: own samples, teacher, and the swapped-out sample."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self._fh = open(self.path, "a" if append else "w")

    def write_groups(self, step: int, groups) -> None:
        for g in groups:
            rec = {
                "schema": TRAJECTORY_SCHEMA,
                "step": step,
                "group_id": g.group_id,
                "prompt": g.prompt,
                "confidence": g.confidence,
                "injected": g.injected,
                "trajectories": [
                    {"tokens": list(t.tokens), "reward": t.reward, "is_teacher": t.is_teacher}
                    for t in g.trajectories
                ],
                "replaced": None if g.replaced is None else
                {"tokens": list(g.replaced.tokens), "reward": g.replaced.reward, "is_teacher": False},
            }
            self._fh.write(json.dumps(rec) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def recompute_from_log(path) -> dict[int, dict]:
    """Per-step teacher-excluded aggregates recomputed from a trajectory dump."""
    acc: dict[int, dict] = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            a = acc.setdefault(rec["step"], {"rewards": [], "lengths": [], "injections": 0})
            own = [t for t in rec["trajectories"] if not t["is_teacher"]]
            if rec["replaced"] is not None:
                own.append(rec["replaced"])
            a["rewards"] += [t["reward"] for t in own]
            a["lengths"] += [len(t["tokens"]) for t in own]
            a["injections"] += int(rec["injected"])
    return {
        s: {
            "mean_reward": float(np.mean(a["rewards"])),
            "mean_gen_length": float(np.mean(a["lengths"])),
            "teacher_injection_count": a["injections"],
        }
        for s, a in sorted(acc.items())
    }


# -- gate bound checks -----------------------------------------------------


@dataclass
class BoundReport:
    n: int
    mu: float
    gamma: float
    n_groups: int
    k_gamma: float
    empirical_open_frequency: float
    standard_error: float
    hoeffding_bound: float
    exact_tail: float
    empirical_ok: bool
    exact_ok: bool

    @property
    def passed(self) -> bool:
        return self.empirical_ok and self.exact_ok

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def check_hoeffding(
    samples: Sequence[tuple[int, int]],
    mu_hat: float,
    gamma: float,
    n_se: float = 3.0,
    confidence_fn: Callable[..., float] = confidence,
) -> BoundReport:
    """Compare the observed gate-open rate with exp(-2N(mu - gamma)^2) and the exact binomial tail.

    ``samples`` are ``(S, N)`` pairs from groups of one common size. The
    standard error is that of a binomial frequency whose true rate sits at
    the bound, i.e. the largest rate the bound allows.
    """
    if not mu_hat > gamma:
        raise RegimeError(f"bound applies only for mu > gamma (got mu={mu_hat}, gamma={gamma})")
    arr = np.asarray(samples, dtype=np.int64).reshape(-1, 2)
    if arr.shape[0] == 0:
        raise ValueError("no samples")
    sizes = np.unique(arr[:, 1])
    if sizes.size != 1:
        raise ValueError(f"samples mix group sizes {sizes.tolist()}")
    n = int(sizes[0])
    opens_at = np.array([confidence_fn(s, n) < gamma for s in range(n + 1)])
    freq = float(opens_at[arr[:, 0]].mean())
    bound = hoeffding_bound(n, mu_hat, gamma)
    se = math.sqrt(bound * (1.0 - bound) / arr.shape[0])
    exact = exact_open_probability(n, mu_hat, gamma, confidence_fn=confidence_fn)
    return BoundReport(
        n=n, mu=mu_hat, gamma=gamma, n_groups=int(arr.shape[0]),
        k_gamma=gate_threshold_count(n, gamma),
        empirical_open_frequency=freq, standard_error=se,
        hoeffding_bound=bound, exact_tail=exact,
        empirical_ok=freq <= bound + n_se * se,
        exact_ok=exact <= bound,
    )


DEFAULT_BOUND_GRID_N = (4, 8, 16, 32)
DEFAULT_BOUND_GRID_GAMMA = (0.5, 0.8, 0.9)


def default_bound_grid() -> list[tuple[int, float, float]]:
    cells = []
    for n in DEFAULT_BOUND_GRID_N:
        for g in DEFAULT_BOUND_GRID_GAMMA:
            for mu in (g + 0.05, g + 0.1, 0.99):
                cells.append((n, g, min(round(mu, 10), 1.0)))
    return cells


def hoeffding_suite(
    cells: Iterable[tuple[int, float, float]] | None = None,
    n_groups: int = 100_000,
    seed: int = 0,
    confidence_fn: Callable[..., float] = confidence,
) -> list[BoundReport]:
    """Simulate Bernoulli(mu) groups per cell and check the gate-open envelope."""
    rng = np.random.default_rng(seed)
    reports = []
    for n, gamma, mu in cells if cells is not None else default_bound_grid():
        successes = rng.binomial(n, mu, size=n_groups)
        samples = np.column_stack([successes, np.full(n_groups, n)])
        reports.append(check_hoeffding(samples, mu, gamma, confidence_fn=confidence_fn))
    return reports


def threshold_enumeration(
    max_n: int = 64,
    gamma_percent: Iterable[int] = range(1, 100),
    confidence_fn: Callable[..., float] = confidence,
) -> list[tuple[int, int, float]]:
    """Cases where the gate rule disagrees with S < gamma (2 + N) - 1.

    Thresholds are the percentages j / 100; the reference side is evaluated
    in integers, 100 (S + 1) < j (N + 2), so it carries no rounding.
    """
    failures = []
    for j in gamma_percent:
        gamma = j / 100
        for n in range(1, max_n + 1):
            for s in range(n + 1):
                if (confidence_fn(s, n) < gamma) != (100 * (s + 1) < j * (n + 2)):
                    failures.append((n, s, gamma))
    return failures


# -- run-level probes ------------------------------------------------------


@dataclass
class ConsistencyReport:
    window: int
    injection_rate: float
    mean_injections: float
    min_cosine: float
    mean_cosine: float
    injection_free_steps: int

    def holds(self, max_injection_rate: float = 0.0, min_cosine: float = 0.99) -> bool:
        return self.injection_rate <= max_injection_rate and self.min_cosine >= min_cosine


def consistency_probe(run: RunMetrics, window: int) -> ConsistencyReport:
    """Injection rate and HAPO-vs-GRPO gradient agreement over the last ``window`` steps."""
    if window < 1 or window > len(run.records):
        raise ValueError(f"window {window} not in [1, {len(run.records)}]")
    tail = run.records[-window:]
    inj = np.array([r.teacher_injection_count for r in tail], dtype=float)
    groups = np.array([max(r.n_groups, 1) for r in tail], dtype=float)
    cos = np.array([r.consistency_cosine for r in tail], dtype=float)
    if np.any(np.isnan(cos)):
        raise ValueError("run did not track gradient consistency in this window")
    return ConsistencyReport(
        window=window,
        injection_rate=float(np.mean(inj / groups)),
        mean_injections=float(inj.mean()),
        min_cosine=float(cos.min()),
        mean_cosine=float(cos.mean()),
        injection_free_steps=int(np.sum(inj == 0)),
    )


class GradientWindow:
    """Sums the HAPO and pure-GRPO batch gradients from ``start_step`` on.

    The cosine of the two sums compares the window's average update
    directions, i.e. the expected gradients rather than single batches.
    Pass ``add`` as the trainer's gradient sink.
    """

    def __init__(self, start_step: int = 0):
        self.start_step = start_step
        self.hapo = None
        self.grpo = None
        self.n_steps = 0
        self.n_identical = 0

    def add(self, step: int, grad, grpo_grad) -> None:
        if step < self.start_step:
            return
        self.hapo = grad if self.hapo is None else self.hapo + grad
        self.grpo = grpo_grad if self.grpo is None else self.grpo + grpo_grad
        self.n_steps += 1
        self.n_identical += grad is grpo_grad

    def cosine(self) -> float:
        if self.hapo is None:
            raise ValueError("no gradients collected")
        if self.n_identical == self.n_steps:
            return 1.0
        return cosine(self.hapo, self.grpo)


CURVE_COLUMNS = ("step", "mean_reward", "mean_gen_length", "teacher_injection_count")


def export_curves(run: RunMetrics, out_dir) -> dict[str, Path]:
    """Write the reward / length / teacher-count series and a JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = [r.step for r in run.records]
    if steps and steps != list(range(steps[0], steps[0] + len(steps))):
        raise ValueError("run records have gaps in the step index")
    curves = out / "curves.csv"
    with open(curves, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in run.records:
            w.writerow([r.step, repr(r.mean_reward), repr(r.mean_gen_length), r.teacher_injection_count])
    summary = out / "curves_summary.json"
    n = len(run.records)
    q = max(n // 4, 1)
    inj = run.column("teacher_injection_count")
    summary.write_text(json.dumps({
        "method": run.method,
        "seed": run.seed,
        "n_steps": n,
        "panels": {c: run.column(c).tolist() for c in CURVE_COLUMNS[1:]},
        "step": steps,
        "final_mean_reward": float(np.mean(run.column("mean_reward")[-q:])) if n else None,
        "injections_first_quartile": float(inj[:q].mean()) if n else None,
        "injections_last_quartile": float(inj[-q:].mean()) if n else None,
        "max_grad_norm": run.max_grad_norm,
    }, indent=1))
    return {"curves": curves, "summary": summary}
