import csv
import json

import numpy as np
import pytest

from dymecu import checkpoint, config
from dymecu.cli import main
from dymecu.config import RunConfig
from dymecu.experiment import (
    expand_ablation,
    random_policy_metrics,
    read_jsonl,
    run_ablation,
    run_dir,
    run_experiment,
)


def tiny_cfg(**run):
    return RunConfig().replace(
        run={"name": "tiny", "seeds": [0, 1], "total_steps": 256, **run},
        env={"width": 4, "height": 4, "max_steps": 20},
        curiosity={"hidden": [16], "latent_dim": 8, "minibatch": 64, "epochs": 1},
        ppo={"rollout_steps": 128, "minibatch": 64, "hidden": [16]},
    )


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.toml"
    config.save(tiny_cfg(), path)
    return path


def test_run_writes_logs_and_summary(tmp_path, cfg_file, capsys):
    assert main(["run", "--config", str(cfg_file), "--seeds", "5", "--output-root", str(tmp_path / "out")]) == 0
    out = tmp_path / "out" / "runs" / "tiny"
    logs = sorted(out.glob("seed_*/metrics.jsonl"))
    assert len(logs) == 5
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [0, 1, 2, 3, 4]
    assert config.load(out / "config.toml").run.seeds == [0, 1, 2, 3, 4]
    for path in logs:
        steps = [r["step"] for r in read_jsonl(path)]
        assert steps == sorted(set(steps))
    assert "episode_coverage" in capsys.readouterr().out


def test_csv_means_match_logs(tmp_path):
    cfg = tiny_cfg(seeds=[0, 1, 2])
    run_experiment(cfg, tmp_path)
    out = run_dir(cfg, tmp_path)
    logs = {s: read_jsonl(out / f"seed_{s}" / "metrics.jsonl") for s in cfg.run.seeds}
    rows = list(csv.DictReader((out / "aggregate.csv").open()))
    assert rows and not any(r["metric"] == "wall_clock" for r in rows)
    by_step = {recs[i]["step"]: i for recs in logs.values() for i in range(len(recs))}
    for r in rows:
        i = by_step[int(r["step"])]
        vals = [logs[s][i][r["metric"]] for s in logs if logs[s][i][r["metric"]] is not None]
        assert int(r["n"]) == len(vals)
        assert abs(float(r["mean"]) - float(np.mean(vals))) <= 1e-12
    summary = json.loads((out / "summary.json").read_text())
    for key, stat in summary["final"].items():
        vals = [logs[s][-1][key] for s in logs if logs[s][-1][key] is not None]
        assert abs(stat["mean"] - float(np.mean(vals))) <= 1e-12


def test_summary_is_byte_identical(tmp_path):
    cfg = tiny_cfg()
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("summary.json", "aggregate.csv"):
        assert (run_dir(cfg, tmp_path / "a") / name).read_bytes() == (run_dir(cfg, tmp_path / "b") / name).read_bytes()


def test_parallel_matches_serial(tmp_path):
    cfg = tiny_cfg()
    run_experiment(cfg, tmp_path / "serial")
    run_experiment(cfg.replace(run={"workers": 2}), tmp_path / "par")
    a = (run_dir(cfg, tmp_path / "serial") / "summary.json").read_text()
    b = json.loads((run_dir(cfg, tmp_path / "par") / "summary.json").read_text())
    a = json.loads(a)
    a["config"]["run"].pop("workers"), b["config"]["run"].pop("workers")
    assert a == b


def test_output_root_from_environment(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("DYMECU_OUTPUT_ROOT", str(tmp_path / "env_root"))
    assert main(["run", "--config", str(cfg_file), "--seeds", "1"]) == 0
    assert (tmp_path / "env_root" / "runs" / "tiny" / "summary.json").exists()


def test_replay_check(cfg_file, capsys):
    assert main(["replay-check", "--config", str(cfg_file), "--seed", "0"]) == 0
    assert "identical: True" in capsys.readouterr().out


def test_bad_config_exits_with_line(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('[run]\nname = "x"\n\n[env]\nwidht = 3\n')
    assert main(["run", "--config", str(path), "--output-root", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert f"{path}:5" in err and "env.widht" in err


def test_numeric_failure_writes_checkpoint(tmp_path, capsys):
    path = tmp_path / "boom.toml"
    cfg = tiny_cfg(name="boom", seeds=[0]).replace(curiosity={"lr": 1e300})
    config.save(cfg, path)
    with np.errstate(all="ignore"):
        code = main(["run", "--config", str(path), "--output-root", str(tmp_path)])
    assert code == 3
    ck = tmp_path / "runs" / "boom" / "seed_0" / "checkpoint.npz"
    assert ck.exists() and str(ck) in capsys.readouterr().err
    arrays, meta = checkpoint.read(ck)
    assert meta["curiosity"]["module"] == "dymecu" and "policy/policy" in arrays


def test_score_command(capsys):
    assert main(["score", "--method", "Ours", "--reference", "3.019", "--per-row"]) == 0
    out = capsys.readouterr().out
    assert "mean HNS 3.019081" in out and "delta to reference +0.000081" in out
    assert "Demon Attack" in out and "flagged" in out


def test_score_bns(tmp_path, capsys):
    p = tmp_path / "t.csv"
    p.write_text("task,random,human,ours,b1,b2\nx,200,900,400,250,350\n")
    assert main(["score", "--table", str(p), "--bns", "--method", "ours", "--baselines", "b1,b2"]) == 0
    assert "mean BNS 2.0" in capsys.readouterr().out


def test_expand_ablation():
    runs = expand_ablation(tiny_cfg())
    names = [n for n, _ in runs]
    assert len(runs) == 4 * 3 + 3
    assert "one_source_update_alpha0.9999" in names and names[-3:] == ["rnd", "icm", "disagreement"]
    alphas = sorted({c.curiosity.alpha for n, c in runs if n.startswith("dual")})
    assert alphas == [0.99, 0.999, 0.9999]


def test_random_policy_floor_is_deterministic():
    cfg = tiny_cfg()
    assert random_policy_metrics(cfg, 0) == random_policy_metrics(cfg, 0)


def test_run_ablation_small(tmp_path):
    cfg = tiny_cfg(seeds=[0])
    result = run_ablation(cfg, tmp_path, ["dual"], [0.99, 0.9999], ["rnd", "icm"])
    assert not result["failures"]
    assert [r["run"] for r in result["rows"]][:2] == ["dual_alpha0.99", "dual_alpha0.9999"]
    assert all(r["bns"] is not None or r["flag"] for r in result["rows"])
    out = run_dir(cfg, tmp_path)
    assert (out / "ablation.json").exists() and (out / "ablation.csv").exists()
