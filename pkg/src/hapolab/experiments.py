"""Run summaries, method-comparison matrices and the asymptotic-bias report."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .baselines import BaselineConfig
from .env import TaskSpec
from .metrics import RunMetrics
from .trainer import TrainConfig, evaluate, train

CELL_SCHEMA = "hapolab.cell/1"


def trailing_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Mean of the last ``window`` entries at every step (shorter at the start)."""
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def steps_to_success(run: RunMetrics, level: float = 0.9, window: int = 50) -> int | None:
    """First step whose trailing mean training success reaches ``level``."""
    tm = trailing_mean(run.column("mean_reward"), window)
    hits = np.nonzero(tm >= level)[0]
    return int(run.records[hits[0]].step) if hits.size else None


@dataclass
class CellSummary:
    method: str
    seed: int
    steps: int
    final_success: float
    max_trailing_success: float
    steps_to_0_9: int | None
    exact_success: float
    teacher_probability: float
    non_teacher_probability: float
    injection_rate_first_quartile: float
    injection_rate_final_quartile: float
    min_injection_rate: float
    final_window_min_cosine: float

    def to_dict(self) -> dict:
        return {"schema": CELL_SCHEMA, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "CellSummary":
        d = dict(d)
        d.pop("schema", None)
        return cls(**d)


def summarize_run(run: RunMetrics, task: TaskSpec, window: int = 50, label: str | None = None) -> CellSummary:
    n = len(run.records)
    q = max(n // 4, 1)
    rewards = run.column("mean_reward")
    tm = trailing_mean(rewards, window)
    rate = run.column("teacher_injection_count") / np.maximum(run.column("n_groups"), 1)
    cos = run.column("consistency_cosine")[-window:]
    cos = cos[~np.isnan(cos)]
    ev = evaluate(run.params, task, n_samples=1)
    return CellSummary(
        method=label or run.method,
        seed=run.seed,
        steps=n,
        final_success=float(tm[-1]),
        max_trailing_success=float(tm.max()),
        steps_to_0_9=steps_to_success(run, 0.9, window),
        exact_success=float(np.mean(list(ev.exact_success.values()))),
        teacher_probability=ev.teacher_probability,
        non_teacher_probability=ev.non_teacher_probability,
        injection_rate_first_quartile=float(rate[:q].mean()),
        injection_rate_final_quartile=float(rate[-q:].mean()),
        min_injection_rate=float(rate.min()),
        final_window_min_cosine=float(cos.min()) if cos.size else float("nan"),
    )


@dataclass
class SeparationReport:
    """HAPO versus static mixture on the non-teacher solution, seed by seed."""

    seeds: list[int]
    hapo_non_teacher: list[float]
    static_non_teacher: list[float]
    wins: int
    ties: int
    sign_test_p: float
    static_min_injection_rate: float
    hapo_final_injection_rate: float

    @property
    def hapo_mean_non_teacher(self) -> float:
        return float(np.mean(self.hapo_non_teacher))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hapo_mean_non_teacher"] = self.hapo_mean_non_teacher
        return d


def separation_report(hapo: Sequence[CellSummary], static: Sequence[CellSummary]) -> SeparationReport:
    """Pair cells by seed; one-sided sign test on HAPO > static mixture, ties dropped."""
    by_seed = {c.seed: c for c in static}
    pairs = [(h, by_seed[h.seed]) for h in hapo if h.seed in by_seed]
    if not pairs:
        raise ValueError("no seed is shared by the two methods")
    diffs = np.array([h.non_teacher_probability - s.non_teacher_probability for h, s in pairs])
    wins = int(np.sum(diffs > 0))
    ties = int(np.sum(diffs == 0))
    n = len(pairs) - ties
    p = stats.binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return SeparationReport(
        seeds=[h.seed for h, _ in pairs],
        hapo_non_teacher=[h.non_teacher_probability for h, _ in pairs],
        static_non_teacher=[s.non_teacher_probability for _, s in pairs],
        wins=wins,
        ties=ties,
        sign_test_p=float(p),
        static_min_injection_rate=min(s.min_injection_rate for _, s in pairs),
        hapo_final_injection_rate=float(np.mean([h.injection_rate_final_quartile for h, _ in pairs])),
    )


def run_cell(task: TaskSpec, config: TrainConfig, method: BaselineConfig, out_dir=None,
             window: int = 50, checkpoint_every: int | None = None, label: str | None = None) -> CellSummary:
    """Train one (method, seed) cell and write its summary next to the metrics."""
    run = train(task, config, method, output_dir=out_dir, checkpoint_every=checkpoint_every or None)
    summary = summarize_run(run, task, window, label)
    if out_dir is not None:
        (Path(out_dir) / "cell.json").write_text(json.dumps(summary.to_dict(), indent=1))
    return summary


def load_cell(out_dir) -> CellSummary | None:
    """Summary of a completed cell, or None when the cell has not finished."""
    path = Path(out_dir) / "cell.json"
    if not path.is_file():
        return None
    return CellSummary.from_dict(json.loads(path.read_text()))


SUMMARY_FIELDS = ("final_success", "exact_success", "non_teacher_probability", "teacher_probability",
                  "injection_rate_final_quartile")


def summary_table(cells: Sequence[CellSummary]) -> list[dict]:
    """One row per method: mean and standard deviation over seeds of each summary field."""
    rows = []
    for method in dict.fromkeys(c.method for c in cells):
        mine = [c for c in cells if c.method == method]
        row = {"method": method, "n_runs": len(mine)}
        for f in SUMMARY_FIELDS:
            vals = np.array([getattr(c, f) for c in mine], dtype=float)
            row[f] = float(vals.mean())
            row[f + "_std"] = float(vals.std()) if vals.size > 1 else 0.0
        reached = [c.steps_to_0_9 for c in mine if c.steps_to_0_9 is not None]
        row["reached_0_9"] = len(reached)
        row["median_steps_to_0_9"] = float(np.median(reached)) if reached else math.nan
        rows.append(row)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    cols = ["method", "n_runs", *SUMMARY_FIELDS, "reached_0_9", "median_steps_to_0_9"]
    head = " | ".join(cols)
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = []
        for c in cols:
            v = r[c]
            cells.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        lines.append(" | ".join(cells))
    return "\n".join(lines)
