"""Seed fans, metric logs and ablation sweeps.

Output layout under ``<root>/<run.output_dir>/<run.name>/`` (root defaults to
the working directory, or ``$DYMECU_OUTPUT_ROOT``)::

    config.toml            canonical copy of the config that ran
    seed_<s>/metrics.jsonl one JSON object per training iteration
    seed_<s>/checkpoint.npz only written when a run dies on non-finite values
    summary.json           final per-seed metrics and their across-seed mean/std
    aggregate.csv          step,metric,n,mean,std for every iteration and metric

Metrics record fields (JSONL): ``iteration``, ``step`` (cumulative env steps,
strictly increasing), ``phase``, ``episodes`` (finished this iteration),
``return_mean``, ``episode_coverage`` (mean fraction of cells an episode
visited), ``episode_length``, ``coverage`` (fraction of cells visited since
the start of the run), ``extrinsic_sum``, ``r_int_raw_mean/std``,
``r_int_norm_mean/std``, the curiosity losses (``loss_learner1``, ...), the PPO
statistics (``policy_loss``, ``value_loss``, ``entropy``, ``loss``,
``approx_kl``, ``clip_frac``) and ``wall_clock`` seconds. Episode fields are
``null`` for iterations in which no episode finished. ``wall_clock`` never
reaches ``summary.json`` or ``aggregate.csv``, which are therefore
byte-identical across repeated runs.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from dymecu import checkpoint
from dymecu.config import RunConfig, derive_seeds, dumps
from dymecu.envs import coverage
from dymecu.ppo import NumericalError, make_env, train_loop
from dymecu.scores import DegenerateRowError, bns

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DYMECU_OUTPUT_ROOT"
NONDETERMINISTIC = ("wall_clock",)

ABLATION_VARIANTS = {
    "dual": "dymecu",
    "one_learner": "dymecu_one_learner",
    "one_source_update": "dymecu_one_source",
    "predictor_heads": "dymecu_predictor_heads",
}
ABLATION_ALPHAS = (0.99, 0.999, 0.9999)
ABLATION_BASELINES = ("rnd", "icm", "disagreement")


class RunFailed(RuntimeError):
    def __init__(self, message: str, checkpoint_path: Path | None = None) -> None:
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


def output_root(explicit: str | Path | None = None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def run_dir(cfg: RunConfig, root: str | Path | None = None) -> Path:
    return output_root(root) / cfg.run.output_dir / cfg.run.name


def deterministic_view(record: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in record.items() if k not in NONDETERMINISTIC}


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def run_seed(cfg: RunConfig, seed: int, out_dir: str | Path | None = None) -> list[dict[str, Any]]:
    """Train one seed; write ``metrics.jsonl`` into ``out_dir`` if given.

    On non-finite values a checkpoint of the last state is written next to the
    log and ``RunFailed`` is raised.
    """
    seed_dir = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
    if seed_dir is not None:
        seed_dir.mkdir(parents=True, exist_ok=True)
    try:
        trainer = train_loop(cfg, seed)
    except NumericalError as exc:
        path = None
        if seed_dir is not None and exc.trainer is not None:
            _write_jsonl(seed_dir / "metrics.jsonl", exc.trainer.records)
            path = checkpoint.save(
                seed_dir / "checkpoint.npz",
                exc.trainer.module,
                exc.trainer.policy,
                {"seed": seed, "step": exc.trainer.steps, "error": str(exc)},
            )
        raise RunFailed(f"seed {seed}: {exc}", path) from exc
    if seed_dir is not None:
        _write_jsonl(seed_dir / "metrics.jsonl", trainer.records)
    return trainer.records


def _write_jsonl(path: Path, records: Iterable[dict[str, Any]]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _numeric_keys(records: Sequence[dict[str, Any]]) -> list[str]:
    keys: list[str] = []
    for rec in records:
        for k, v in rec.items():
            if k in NONDETERMINISTIC or k in ("iteration", "step") or k in keys:
                continue
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                keys.append(k)
    return sorted(keys)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize(cfg: RunConfig, logs: dict[int, list[dict[str, Any]]]) -> dict[str, Any]:
    """Final-iteration metrics per seed and their across-seed mean and std."""
    per_seed = {str(s): deterministic_view(recs[-1]) for s, recs in sorted(logs.items())}
    keys = _numeric_keys([recs[-1] for recs in logs.values()])
    final = {}
    for k in keys:
        vals = [recs[-1][k] for recs in logs.values() if recs[-1].get(k) is not None]
        if vals:
            mean, std = _mean_std(vals)
            final[k] = {"mean": mean, "std": std, "n": len(vals)}
    return {
        "name": cfg.run.name,
        "seeds": sorted(logs),
        "total_steps": cfg.run.total_steps,
        "module": cfg.curiosity.module,
        "config": cfg.to_dict(),
        "per_seed": per_seed,
        "final": final,
    }


def aggregate_csv(logs: dict[int, list[dict[str, Any]]]) -> str:
    """``step,metric,n,mean,std`` rows, one per iteration index and numeric metric."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "metric", "n", "mean", "std"])
    n_iters = min(len(r) for r in logs.values())
    seeds = sorted(logs)
    for i in range(n_iters):
        recs = [logs[s][i] for s in seeds]
        steps = {r["step"] for r in recs}
        if len(steps) != 1:
            raise ValueError(f"seeds disagree on the step count of iteration {i}: {sorted(steps)}")
        for k in _numeric_keys(recs):
            vals = [r[k] for r in recs if r.get(k) is not None]
            if not vals:
                continue
            mean, std = _mean_std(vals)
            writer.writerow([recs[0]["step"], k, len(vals), repr(mean), repr(std)])
    return buf.getvalue()


def _run_seed_job(args: tuple[RunConfig, int, str | None]) -> list[dict[str, Any]]:
    cfg, seed, out_dir = args
    return run_seed(cfg, seed, out_dir)


def run_experiment(
    cfg: RunConfig,
    root: str | Path | None = None,
    workers: int | None = None,
    write: bool = True,
) -> dict[str, Any]:
    """Run every seed of ``cfg`` and write logs, ``summary.json`` and ``aggregate.csv``."""
    out = run_dir(cfg, root) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.toml").write_text(dumps(cfg), encoding="utf-8")
    n_workers = workers or cfg.run.workers
    seeds = list(cfg.run.seeds)
    jobs = [(cfg, s, None if out is None else str(out)) for s in seeds]
    if n_workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(n_workers, len(seeds))) as pool:
            results = list(pool.map(_run_seed_job, jobs))
    else:
        results = [_run_seed_job(j) for j in jobs]
    logs = dict(zip(seeds, results))
    summary = summarize(cfg, logs)
    if out is not None:
        (out / "summary.json").write_text(_dump_json(summary), encoding="utf-8")
        (out / "aggregate.csv").write_text(aggregate_csv(logs), encoding="utf-8")
        log.info("wrote %s", out)
    summary["_logs"] = logs
    return summary


def random_policy_metrics(cfg: RunConfig, seed: int) -> dict[str, Any]:
    """Uniform-random-action reference over ``cfg.run.total_steps``.

    Reports the metrics of the final rollout-sized window so they line up with
    the last iteration of a trained run.
    """
    env = make_env(cfg)
    rng = np.random.default_rng(derive_seeds(seed)["rollout"])
    env.reset(derive_seeds(seed)["env"])
    total, window = cfg.run.total_steps, cfg.ppo.rollout_steps
    last_start = ((total - 1) // window) * window
    visited, ep_visits = {env.state_id()}, {env.state_id()}
    ep_return = 0.0
    returns, covs = [], []
    for t in range(total):
        _, r, done = env.step(int(rng.integers(env.n_actions)))
        visited.add(env.state_id())
        ep_visits.add(env.state_id())
        ep_return += r
        if done:
            if t >= last_start:
                returns.append(ep_return)
                covs.append(len(ep_visits) / env.n_states)
            env.reset()
            ep_return = 0.0
            ep_visits = {env.state_id()}
    return {
        "step": total,
        "return_mean": float(np.mean(returns)) if returns else None,
        "episode_coverage": float(np.mean(covs)) if covs else None,
        "coverage": coverage(visited, env),
    }


def _seed_mean(logs: dict[int, list[dict[str, Any]]], metric: str) -> float | None:
    vals = [recs[-1].get(metric) for recs in logs.values()]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def expand_ablation(
    cfg: RunConfig,
    variants: Sequence[str] = tuple(ABLATION_VARIANTS),
    alphas: Sequence[float] = ABLATION_ALPHAS,
    baselines: Sequence[str] = ABLATION_BASELINES,
) -> list[tuple[str, RunConfig]]:
    """Named configs for every variant x alpha plus each baseline (alpha-free)."""
    runs = []
    base_name = cfg.run.name
    for variant in variants:
        if variant not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {variant!r}")
        for alpha in alphas:
            name = f"{variant}_alpha{alpha:g}"
            runs.append(
                (
                    name,
                    cfg.replace(
                        run={"name": f"{base_name}/{name}"},
                        curiosity={"module": ABLATION_VARIANTS[variant], "alpha": float(alpha)},
                    ),
                )
            )
    for b in baselines:
        runs.append((b, cfg.replace(run={"name": f"{base_name}/{b}"}, curiosity={"module": b})))
    return runs


def run_ablation(
    cfg: RunConfig,
    root: str | Path | None = None,
    variants: Sequence[str] = tuple(ABLATION_VARIANTS),
    alphas: Sequence[float] = ABLATION_ALPHAS,
    baselines: Sequence[str] = ABLATION_BASELINES,
    metric: str = "episode_coverage",
    workers: int | None = None,
) -> dict[str, Any]:
    """Run the ablation matrix and score every variant by BNS.

    BNS uses the seed-mean of ``metric`` at the final iteration, the uniform
    random policy as the floor and the mean over ``baselines`` as the reference.
    """
    runs = expand_ablation(cfg, variants, alphas, baselines)
    scores: dict[str, float | None] = {}
    failures: dict[str, str] = {}
    for name, run_cfg in runs:
        try:
            summary = run_experiment(run_cfg, root, workers)
        except RunFailed as exc:
            failures[name] = str(exc)
            scores[name] = None
            continue
        scores[name] = _seed_mean(summary["_logs"], metric)
    random_vals = [random_policy_metrics(cfg, s).get(metric) for s in cfg.run.seeds]
    random_vals = [v for v in random_vals if v is not None]
    random_score = float(np.mean(random_vals)) if random_vals else None
    base_scores = [scores[b] for b in baselines if scores.get(b) is not None]
    baseline_avg = float(np.mean(base_scores)) if base_scores and len(base_scores) == len(baselines) else None

    rows = []
    for name, run_cfg in runs:
        if name in baselines:
            continue
        value = None
        flag = None
        if scores[name] is None or random_score is None or baseline_avg is None:
            flag = "missing score"
        else:
            try:
                value = bns(scores[name], random_score, baseline_avg)
            except DegenerateRowError as exc:
                flag = str(exc)
        if value is not None and not math.isfinite(value):
            flag, value = "non-finite", None
        rows.append(
            {
                "run": name,
                "module": run_cfg.curiosity.module,
                "alpha": run_cfg.curiosity.alpha,
                "score": scores[name],
                "bns": value,
                "flag": flag,
            }
        )
    result = {
        "metric": metric,
        "random_score": random_score,
        "baseline_scores": {b: scores.get(b) for b in baselines},
        "baseline_avg": baseline_avg,
        "rows": rows,
        "failures": failures,
    }
    out = run_dir(cfg, root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(_dump_json(result), encoding="utf-8")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "module", "alpha", "score", "bns", "flag"])
    for r in rows:
        writer.writerow([r["run"], r["module"], r["alpha"], r["score"], r["bns"], r["flag"] or ""])
    (out / "ablation.csv").write_text(buf.getvalue(), encoding="utf-8")
    return result


def replay_check(cfg: RunConfig, seed: int | None = None) -> tuple[bool, str]:
    """Run one seed twice in-process and compare deterministic log content."""
    s = cfg.run.seeds[0] if seed is None else seed
    a = [deterministic_view(r) for r in run_seed(cfg, s)]
    b = [deterministic_view(r) for r in run_seed(cfg, s)]
    if a == b:
        return True, f"seed {s}: {len(a)} iterations identical"
    for i, (ra, rb) in enumerate(zip(a, b)):
        if ra != rb:
            diff = sorted(k for k in set(ra) | set(rb) if ra.get(k) != rb.get(k))
            return False, f"seed {s}: iteration {i} differs in {diff}"
    return False, f"seed {s}: log lengths differ ({len(a)} vs {len(b)})"
