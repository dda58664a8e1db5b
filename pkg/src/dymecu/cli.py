"""Command line entry point: ``dymecu {run,ablate,score,replay-check}``.

Exit codes: 0 success, 1 check failed (replay mismatch), 2 invalid config or
arguments, 3 a run hit non-finite values (a checkpoint is written).
"""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

from dymecu import config as config_mod
from dymecu.config import ConfigError, RunConfig
from dymecu.experiment import (
    ABLATION_ALPHAS,
    ABLATION_BASELINES,
    ABLATION_VARIANTS,
    RunFailed,
    deterministic_view,
    read_jsonl,
    run_ablation,
    run_dir,
    run_experiment,
)
from dymecu.scores import aggregate, bns_table, load_table

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _load_config(args: argparse.Namespace) -> RunConfig:
    try:
        cfg = config_mod.load(args.config)
    except ConfigError as exc:
        where = f"{args.config}:{exc.line}" if exc.line is not None else str(args.config)
        raise ConfigError(f"{where}: {exc.message}") from None
    overrides: dict[str, dict] = {"run": {}}
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        overrides["run"]["seeds"] = list(range(args.seeds))
    if getattr(args, "total_steps", None) is not None:
        overrides["run"]["total_steps"] = args.total_steps
    if getattr(args, "workers", None) is not None:
        overrides["run"]["workers"] = args.workers
    cfg = cfg.replace(**overrides)
    config_mod.validate(cfg)
    return cfg


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    summary = run_experiment(cfg, args.output_root)
    out = run_dir(cfg, args.output_root)
    print(f"{cfg.run.name}: {len(cfg.run.seeds)} seed(s) -> {out}")
    for key in ("episode_coverage", "coverage", "return_mean", "r_int_raw_mean"):
        if key in summary["final"]:
            s = summary["final"][key]
            print(f"  {key:18s} mean {s['mean']:.6g}  std {s['std']:.6g}  (n={s['n']})")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas else list(ABLATION_ALPHAS)
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    result = run_ablation(cfg, args.output_root, variants, alphas, ABLATION_BASELINES, args.metric)
    print(f"metric {result['metric']}: random {result['random_score']}, baseline avg {result['baseline_avg']}")
    for row in result["rows"]:
        shown = "n/a" if row["bns"] is None else f"{row['bns']:.4f}"
        print(f"  {row['run']:32s} score {row['score']}  BNS {shown}{'  [' + row['flag'] + ']' if row['flag'] else ''}")
    if result["failures"]:
        for name, msg in result["failures"].items():
            print(f"  FAILED {name}: {msg}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    table = load_table(args.table)
    if args.bns:
        if not args.baselines:
            raise ConfigError("--bns needs --baselines")
        baselines = args.baselines.split(",")
        rows = [{"random": r.random, **r.scores} for r in table.rows]
        per_row, mean = bns_table(rows, args.method, baselines)
        for r, v in zip(table.rows, per_row):
            print(f"{r.task:20s} BNS {'flagged' if v is None else f'{v:.6f}'}")
        print(f"mean BNS {mean}")
        return EXIT_OK
    methods = [args.method] if args.method else table.methods
    for m in methods:
        agg = aggregate(table, m)
        if args.per_row:
            for task, v in agg.per_row.items():
                mark = "  [flagged: random > human]" if task in agg.flagged else ""
                print(f"{m:14s} {task:20s} HNS {'excluded' if v is None else f'{v:.6f}'}{mark}")
        line = f"{m:14s} mean HNS {agg.mean_hns:.6f}  without flagged rows {agg.mean_hns_without_flagged:.6f}  #SOTA {agg.n_sota}"
        if args.reference is not None:
            line += f"  delta to reference {agg.mean_hns - args.reference:+.6f}"
        print(line)
        if agg.flagged:
            print(f"{'':14s} flagged rows: {', '.join(agg.flagged)}")
    return EXIT_OK


def cmd_replay_check(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(run={"seeds": [args.seed]})
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        run_experiment(cfg, a)
        run_experiment(cfg, b)
        da, db = run_dir(cfg, a), run_dir(cfg, b)
        same_summary = (da / "summary.json").read_bytes() == (db / "summary.json").read_bytes()
        same_csv = (da / "aggregate.csv").read_bytes() == (db / "aggregate.csv").read_bytes()
        same_logs = all(
            [deterministic_view(r) for r in read_jsonl(da / f"seed_{s}" / "metrics.jsonl")]
            == [deterministic_view(r) for r in read_jsonl(db / f"seed_{s}" / "metrics.jsonl")]
            for s in cfg.run.seeds
        )
    ok = same_summary and same_csv and same_logs
    print(f"summary.json identical: {same_summary}; aggregate.csv identical: {same_csv}; metric logs identical: {same_logs}")
    return EXIT_OK if ok else EXIT_MISMATCH


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dymecu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, type=Path, help="run config (TOML subset)")
        p.add_argument("--seeds", type=int, help="use seeds 0..N-1 instead of the config's list")
        p.add_argument("--total-steps", type=int, help="override run.total_steps")
        p.add_argument("--workers", type=int, help="parallel seed processes")
        p.add_argument("--output-root", type=Path, help="defaults to $DYMECU_OUTPUT_ROOT or the working directory")

    p = sub.add_parser("run", help="train every seed of a config")
    with_config(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="variant x alpha sweep scored by BNS")
    with_config(p)
    p.add_argument("--alphas", help=f"comma list, default {','.join(map(str, ABLATION_ALPHAS))}")
    p.add_argument("--variants", help=f"comma list from {','.join(ABLATION_VARIANTS)}")
    p.add_argument("--metric", default="episode_coverage", help="final-iteration metric used as the score")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("score", help="HNS/#SOTA (or BNS) over a score table CSV")
    p.add_argument("--table", type=Path, help="task,random,human,<methods> CSV; default: bundled reference table")
    p.add_argument("--method", help="method column to score (default: all)")
    p.add_argument("--reference", type=float, help="print the delta of mean HNS to this value")
    p.add_argument("--per-row", action="store_true")
    p.add_argument("--bns", action="store_true", help="score --method against the mean of --baselines")
    p.add_argument("--baselines", help="comma list of baseline columns for --bns")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("replay-check", help="run a config twice and compare outputs byte for byte")
    with_config(p)
    p.add_argument("--seed", type=int, help="check a single seed")
    p.set_defaults(func=cmd_replay_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunFailed as exc:
        where = f" (checkpoint: {exc.checkpoint_path})" if exc.checkpoint_path else ""
        print(f"run failed: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
