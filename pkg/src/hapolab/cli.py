"""Command-line entry point: train, compare, check-bounds, gradcheck, eval.

Exit codes: 0 success, 2 configuration error, 3 a check or assertion failed,
4 numeric abort (non-finite objective or gradient).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    build_method,
    build_task,
    build_train_config,
    dump_config,
    load_config,
    output_dir,
)
from .env import save_task
from .exceptions import ConfigError, NonFiniteGradientError
from .experiments import format_table, load_cell, run_cell, separation_report, summary_table
from .gating import confidence
from .gradcheck import run_gradcheck
from .metrics import check_hoeffding, default_bound_grid, export_curves, threshold_enumeration
from .trainer import evaluate, load_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK_FAILED = 3
EXIT_NUMERIC = 4

log = logging.getLogger("hapolab")

MUTATIONS = {
    # (S + 2) / (N + 2): the success count shifted by one
    "off_by_one": lambda s, n: (2 + s) / (2 + n),
    # (S + 1) / (N + 1): one pseudo-count dropped from the denominator
    "off_by_one_denominator": lambda s, n: (1 + s) / (1 + n),
}


def _prepare(args) -> tuple[dict, Path]:
    cfg = load_config(args.config, args.set)
    out = Path(args.output) if getattr(args, "output", None) else output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "resolved_config.json")
    if not args.quiet:
        print(json.dumps(cfg, indent=2))
    return cfg, out


def _write_dump(out: Path, err: NonFiniteGradientError) -> Path:
    path = out / "nan_dump.json"
    path.write_text(json.dumps(err.dump, default=str))
    return path


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    task = build_task(cfg)
    method = build_method(cfg)
    tcfg = build_train_config(cfg)
    save_task(task, out / "task.json")
    state = None
    if args.resume and (out / "checkpoint.npz").is_file():
        state = load_checkpoint(out / "checkpoint.npz")
        log.info("resuming from step %d", state.step)
    try:
        run = train(task, tcfg, method, output_dir=out, state=state,
                    checkpoint_every=cfg["output"]["checkpoint_every"] or None)
    except NonFiniteGradientError as err:
        print(f"numeric abort: {err}; state dumped to {_write_dump(out, err)}", file=sys.stderr)
        return EXIT_NUMERIC
    export_curves(run, out)
    ev = evaluate(run.params, task, cfg["eval"]["n_samples"], cfg["eval"]["temperature"],
                  np.random.default_rng(cfg["eval"]["seed"]))
    (out / "eval.json").write_text(json.dumps(ev.to_dict(), indent=1))
    last = run.records[-1] if run.records else None
    if last is not None:
        print(f"{method.method}: step {last.step} mean_reward {last.mean_reward:.4f} "
              f"injections {last.teacher_injection_count}/{last.n_groups} "
              f"eval success {ev.mean_success:.4f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, out = _prepare(args)
    task = build_task(cfg)
    ckpt = args.checkpoint or cfg["eval"]["checkpoint"] or out / "checkpoint.npz"
    if not Path(ckpt).is_file():
        raise ConfigError(f"eval.checkpoint: no checkpoint at {ckpt}")
    state = load_checkpoint(ckpt)
    ev = evaluate(state.params, task, cfg["eval"]["n_samples"], cfg["eval"]["temperature"],
                  np.random.default_rng(cfg["eval"]["seed"]))
    (out / "eval.json").write_text(json.dumps(ev.to_dict(), indent=1))
    print(f"avg@{ev.n_samples} success {ev.mean_success:.4f}  exact {np.mean(list(ev.exact_success.values())):.4f}  "
          f"teacher {ev.teacher_probability:.4f}  non-teacher {ev.non_teacher_probability:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg, out = _prepare(args)
    cc = cfg["compare"]
    if len(cc["methods"]) < 2 or not cc["seeds"]:
        raise ConfigError("compare: need at least 2 methods and at least 1 seed")
    base_method = build_method(cfg)
    methods = []
    for m in cc["methods"]:
        if m == "static_mix":
            if not cc["lambda_mix"]:
                raise ConfigError("compare.lambda_mix: static_mix needs at least one lambda")
            methods += [(f"static_mix_lam{lam:g}", replace(base_method, method=m, lambda_mix=float(lam)))
                        for lam in cc["lambda_mix"]]
        else:
            methods.append((m, replace(base_method, method=m)))
    base_train = build_train_config(cfg)
    cells, failures = [], []
    for seed in cc["seeds"]:
        task = build_task(cfg, seed=seed if cc["task_seed_from_run"] else None)
        # every method of a seed shares the task and the rollout seed
        tcfg = replace(base_train, seed=seed)
        for label, method in methods:
            cell_dir = out / f"seed{seed}" / label
            done = load_cell(cell_dir)
            if done is not None:
                log.info("skipping completed cell %s seed %d", label, seed)
                cells.append(done)
                continue
            try:
                summary = run_cell(task, tcfg, method, cell_dir, cc["success_window"],
                                   cfg["output"]["checkpoint_every"], label=label)
                cells.append(summary)
            except NonFiniteGradientError as err:
                cell_dir.mkdir(parents=True, exist_ok=True)
                _write_dump(cell_dir, err)
                failures.append({"method": label, "seed": seed, "error": "numeric_abort", "message": str(err)})
            if not args.quiet:
                print(f"cell {label} seed {seed} done", file=sys.stderr)
    (out / "failures.json").write_text(json.dumps(failures, indent=1))
    if not cells:
        print("no cell completed", file=sys.stderr)
        return EXIT_NUMERIC
    rows = summary_table(cells)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(format_table(rows))
    hapo = [c for c in cells if c.method == "hapo"]
    reports = {}
    for label, method in methods:
        static = [c for c in cells if c.method == label]
        if method.method != "static_mix" or not hapo or not static:
            continue
        rep = separation_report(hapo, static)
        reports[label] = rep.to_dict()
        print(f"non-teacher mass, hapo vs {label}: hapo wins {rep.wins}/{len(rep.seeds)} (ties {rep.ties}), "
              f"sign test p = {rep.sign_test_p:.3g}; {label} min injection rate "
              f"{rep.static_min_injection_rate:.3f}, hapo final-quartile rate {rep.hapo_final_injection_rate:.3f}")
    if reports:
        (out / "separation.json").write_text(json.dumps(reports, indent=1))
    return EXIT_NUMERIC if failures else EXIT_OK


def cmd_check_bounds(args) -> int:
    cfg, out = _prepare(args)
    bc = cfg["bounds"]
    mutation = args.mutation or bc["mutation"]
    if mutation is not None and mutation not in MUTATIONS:
        raise ConfigError(f"bounds.mutation: unknown mutation {mutation!r} (allowed: {', '.join(MUTATIONS)})")
    fn = MUTATIONS[mutation] if mutation else confidence
    cells = [tuple(c) for c in bc["cells"]] if bc["cells"] is not None else default_bound_grid()
    rng = np.random.default_rng(bc["seed"])
    reports, regime = [], []
    for n, gamma, mu in cells:
        if not mu > gamma:
            regime.append({"n": n, "gamma": gamma, "mu": mu, "error": "regime: bound needs mu > gamma"})
            continue
        s = rng.binomial(int(n), mu, size=bc["n_groups"])
        samples = np.column_stack([s, np.full_like(s, int(n))])
        reports.append(check_hoeffding(samples, mu, gamma, bc["n_se"], confidence_fn=fn))
    lo, hi = bc["gamma_percent"]
    enum_fail = threshold_enumeration(bc["max_n"], range(lo, hi + 1), confidence_fn=fn)
    doc = {
        "schema": "hapolab.bounds/1",
        "mutation": mutation,
        "cells": [r.to_dict() for r in reports],
        "regime_errors": regime,
        "threshold_enumeration": {"max_n": bc["max_n"], "gamma_percent": [lo, hi],
                                  "n_failures": len(enum_fail), "failures": enum_fail[:100]},
    }
    doc["passed"] = all(r.passed for r in reports) and not enum_fail
    (out / "bounds_report.json").write_text(json.dumps(doc, indent=1))
    print(f"{'N':>3} {'gamma':>5} {'mu':>5} {'empirical':>10} {'exact':>10} {'bound':>8}  status")
    for r in reports:
        print(f"{r.n:>3} {r.gamma:>5.2f} {r.mu:>5.2f} {r.empirical_open_frequency:>10.5f} "
              f"{r.exact_tail:>10.5f} {r.hoeffding_bound:>8.5f}  {'ok' if r.passed else 'FAIL'}")
    for e in regime:
        print(f"{e['n']:>3} {e['gamma']:>5.2f} {e['mu']:>5.2f}  {e['error']}")
    print(f"threshold enumeration: {len(enum_fail)} disagreements")
    print("PASS" if doc["passed"] else "FAIL")
    return EXIT_OK if doc["passed"] else EXIT_CHECK_FAILED


def cmd_gradcheck(args) -> int:
    cfg, out = _prepare(args)
    gc = cfg["gradcheck"]
    rep = run_gradcheck(gc["instances"], gc["seed"], gc["h"], gc["tol"])
    doc = rep.to_dict()
    (out / "gradcheck.json").write_text(json.dumps(doc, indent=1))
    for name, err in doc["per_audit"].items():
        print(f"{name:>13}: max relative error {err:.3e}")
    print(f"{doc['n_instances']} instances, {doc['n_excluded']} excluded near clip kinks: "
          f"{'PASS' if rep.passed else 'FAIL'} (tol {gc['tol']:g})")
    return EXIT_OK if rep.passed else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hapolab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hapolab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="experiment config (JSON)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. train.seed=7 (value parsed as JSON)")
        p.add_argument("--output", help="output directory (default: output.dir under $HAPOLAB_OUTPUT_ROOT)")
        p.add_argument("--quiet", action="store_true", help="do not echo the resolved config")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("train", help="train one method")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("compare", help="run a methods x seeds matrix")
    common(p)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("check-bounds", help="gate-open envelope and threshold enumeration")
    common(p, needs_config=False)
    p.add_argument("--mutation", choices=sorted(MUTATIONS), help="swap in a faulty confidence rule")
    p.set_defaults(fn=cmd_check_bounds)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p, needs_config=False)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: eval.checkpoint or output dir)")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
