import json

import numpy as np
import pytest

from hapolab.cli import EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from hapolab.config import DEFAULTS, build_task, build_train_config, load_config, parse_override, resolve
from hapolab.exceptions import ConfigError
from hapolab.experiments import CellSummary, separation_report, summary_table, trailing_mean
from hapolab.gating import Step
from hapolab.gradcheck import central_difference, relative_error, run_gradcheck
from hapolab.metrics import read_metrics_csv
from hapolab.policy import SparseGrad

SMALL = {
    "task": {"family": "lock", "lock": {"vocab_size": 4, "n_prompts": 4, "seq_len": 3}},
    "train": {"steps": 20, "batch_prompts": 4, "group_size": 4},
    "output": {"dir": "run"},
    "eval": {"n_samples": 8},
}


@pytest.fixture
def cfg_file(tmp_path, monkeypatch):
    monkeypatch.setenv("HAPOLAB_OUTPUT_ROOT", str(tmp_path))
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_resolve_echoes_every_default():
    cfg = resolve({})
    assert cfg == DEFAULTS
    assert build_train_config(cfg).gate.schedule.gamma == 0.8


def test_unknown_and_mistyped_keys():
    with pytest.raises(ConfigError, match="train.gate.colour"):
        resolve({"train": {"gate": {"colour": 1}}})
    with pytest.raises(ConfigError, match="train.group_size"):
        resolve({"train": {"group_size": 2.5}})
    with pytest.raises(ConfigError, match="train"):
        resolve({"train": {"group_size": 1}})
    with pytest.raises(ConfigError, match="schema"):
        resolve({"schema": "other/9"})
    with pytest.raises(ConfigError, match="method"):
        resolve({"method": {"method": "dpo"}})


def test_overrides():
    assert parse_override("train.seed=7") == (["train", "seed"], 7)
    assert parse_override("method.method=grpo") == (["method", "method"], "grpo")
    cfg = resolve({}, ["train.seed=7", "train.gate.schedule={\"kind\": \"step\", \"gamma0\": 0.9, "
                                      "\"gamma1\": 0.5, \"switch_step\": 100}"])
    assert cfg["train"]["seed"] == 7
    assert build_train_config(cfg).gate.schedule == Step(0.9, 0.5, 100)
    with pytest.raises(ConfigError):
        parse_override("train.seed")
    with pytest.raises(ConfigError, match="gamma1"):
        resolve({}, ['train.gate.schedule={"kind": "step", "gamma0": 0.9}'])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.json")


def test_build_task_families(tmp_path):
    cfg = resolve({"task": {"family": "chain", "chain": {"n_prompts": 3}}})
    assert build_task(cfg).eos == 0
    assert build_task(resolve(SMALL), seed=3) == build_task(resolve({**SMALL, "task": {**SMALL["task"], "seed": 3}}))


def test_train_command(cfg_file, tmp_path, capsys):
    assert main(["train", "--config", str(cfg_file), "--set", "train.seed=7"]) == EXIT_OK
    run = tmp_path / "run"
    for name in ("metrics.csv", "checkpoint.npz", "resolved_config.json", "curves.csv", "eval.json", "task.json"):
        assert (run / name).is_file()
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["train"]["seed"] == 7
    assert '"seed": 7' in capsys.readouterr().out
    assert len(read_metrics_csv(run / "metrics.csv")) == 20


def test_train_is_byte_deterministic(cfg_file, tmp_path):
    main(["train", "--config", str(cfg_file), "--output", str(tmp_path / "a"), "--quiet"])
    main(["train", "--config", str(cfg_file), "--output", str(tmp_path / "b"), "--quiet"])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_resume_command(cfg_file, tmp_path):
    main(["train", "--config", str(cfg_file), "--output", str(tmp_path / "full"), "--quiet"])
    main(["train", "--config", str(cfg_file), "--output", str(tmp_path / "part"), "--quiet", "--set", "train.steps=8"])
    main(["train", "--config", str(cfg_file), "--output", str(tmp_path / "part"), "--quiet", "--resume"])
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()


def test_config_errors_exit_code(cfg_file, tmp_path):
    assert main(["train", "--config", str(cfg_file), "--set", "train.bogus=1"]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    code = main(["train", "--config", str(cfg_file), "--quiet", "--set", "task.family=file",
                 "--set", f"task.path={tmp_path / 'missing_task.json'}"])
    assert code == EXIT_CONFIG
    assert not (tmp_path / "run" / "metrics.csv").exists()


def test_numeric_abort_exit_code(cfg_file, tmp_path, monkeypatch):
    import hapolab.trainer as trainer

    real = trainer.hapo_batch_objective

    def poisoned(*a, **k):
        obj, grad, stats = real(*a, **k)
        return float("nan"), grad, stats

    monkeypatch.setattr(trainer, "hapo_batch_objective", poisoned)
    assert main(["train", "--config", str(cfg_file), "--quiet"]) == EXIT_NUMERIC
    assert (tmp_path / "run" / "nan_dump.json").is_file()


def test_eval_command(cfg_file, tmp_path):
    main(["train", "--config", str(cfg_file), "--quiet"])
    assert main(["eval", "--config", str(cfg_file), "--quiet"]) == EXIT_OK
    assert main(["eval", "--config", str(cfg_file), "--quiet", "--checkpoint", str(tmp_path / "x.npz")]) == EXIT_CONFIG


def test_compare_resumes(cfg_file, tmp_path, capsys):
    args = ["compare", "--config", str(cfg_file), "--quiet", "--set", "compare.seeds=[0, 1]",
            "--set", 'compare.methods=["grpo", "static_mix", "hapo"]', "--set", "compare.lambda_mix=[0.5, 2]",
            "--set", "train.steps=10"]
    assert main(args) == EXIT_OK
    out = tmp_path / "run"
    summary = (out / "summary.csv").read_text().splitlines()
    assert [row.split(",")[0] for row in summary[1:]] == ["grpo", "static_mix_lam0.5", "static_mix_lam2", "hapo"]
    assert json.loads((out / "failures.json").read_text()) == []
    sep = json.loads((out / "separation.json").read_text())
    assert sorted(sep) == ["static_mix_lam0.5", "static_mix_lam2"]
    assert all(r["static_min_injection_rate"] == 1.0 for r in sep.values())
    before = (out / "seed0" / "grpo" / "metrics.csv").stat().st_mtime_ns
    (out / "seed1" / "hapo" / "cell.json").unlink()
    assert main(args) == EXIT_OK
    assert (out / "seed0" / "grpo" / "metrics.csv").stat().st_mtime_ns == before
    assert (out / "seed1" / "hapo" / "cell.json").is_file()
    assert main(args[:3] + ["--set", 'compare.methods=["hapo"]']) == EXIT_CONFIG


def test_check_bounds_command(tmp_path):
    base = ["check-bounds", "--quiet", "--output", str(tmp_path)]
    ok_cells = "bounds.cells=[[8, 0.8, 0.9], [16, 0.5, 0.6], [8, 0.9, 0.5]]"
    assert main(base + ["--set", ok_cells, "--set", "bounds.n_groups=5000"]) == EXIT_OK
    doc = json.loads((tmp_path / "bounds_report.json").read_text())
    assert doc["passed"] and len(doc["cells"]) == 2 and len(doc["regime_errors"]) == 1
    assert main(base + ["--set", ok_cells, "--set", "bounds.n_groups=5000", "--mutation", "off_by_one"]) \
        == EXIT_CHECK_FAILED


def test_gradcheck_command_deterministic(tmp_path):
    args = ["gradcheck", "--quiet", "--set", "gradcheck.instances=5"]
    assert main(args + ["--output", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--output", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "gradcheck.json").read_bytes() == (tmp_path / "b" / "gradcheck.json").read_bytes()


def test_gradcheck_detects_wrong_gradient():
    from hapolab.env import make_lock_task
    from hapolab.policy import PolicyParams, logp

    task = make_lock_task(3, 1, 1, 1)
    params = PolicyParams.for_task(task)
    key = params.key(0, ())
    num = central_difference(params, lambda p: logp(p, key, 0), [params.encode(key)])
    wrong = SparseGrad(num.codes, num.values * 1.01)
    assert relative_error(wrong, num) > 1e-3
    assert relative_error(SparseGrad.zeros(3), SparseGrad.zeros(3)) == 0.0
    assert run_gradcheck(instances=3, seed=1).passed


def test_trailing_mean():
    np.testing.assert_allclose(trailing_mean([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])


def cell(method, seed, ntp, rate=0.0):
    return CellSummary(method, seed, 10, 0.5, 0.5, None, 0.5, 0.5, ntp, 1.0, rate, rate, float("nan"))


def test_separation_report_sign_test():
    hapo = [cell("hapo", s, 0.4) for s in range(10)]
    static = [cell("static_mix", s, 0.1, 1.0) for s in range(10)]
    rep = separation_report(hapo, static)
    assert rep.wins == 10 and rep.sign_test_p == pytest.approx(2.0**-10)
    static[0] = cell("static_mix", 0, 0.4, 1.0)
    rep = separation_report(hapo, static)
    assert rep.ties == 1 and rep.sign_test_p == pytest.approx(2.0**-9)
    rows = summary_table(hapo + static)
    assert [r["method"] for r in rows] == ["hapo", "static_mix"]
