"""Score normalization and aggregation over per-task score tables."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from dymecu.nn_core import ContractError

REFERENCE_TABLE = "atari_reference_scores.csv"


class DegenerateRowError(ValueError):
    """The normalizing denominator of a row is zero."""


def hns(agent: float, random: float, human: float) -> float:
    """Human-normalized score ``(agent - random) / (human - random)``."""
    if human == random:
        raise DegenerateRowError(f"human score equals random score ({human})")
    return (agent - random) / (human - random)


def bns(method: float, random: float, baseline_avg: float) -> float:
    """Baseline-normalized score ``(method - random) / (baseline_avg - random)``."""
    if baseline_avg == random:
        raise DegenerateRowError(f"baseline average equals random score ({random})")
    return (method - random) / (baseline_avg - random)


@dataclass
class ScoreRow:
    task: str
    random: float
    human: float
    scores: dict[str, float]

    @property
    def inverted(self) -> bool:
        """Random beats human, so the normalizing denominator is negative."""
        return self.random > self.human


@dataclass
class ScoreTable:
    methods: list[str]
    rows: list[ScoreRow] = field(default_factory=list)


def load_table(path: str | Path | None = None) -> ScoreTable:
    """Read ``task,random,human,<method>...`` CSV; ``None`` loads the bundled reference table.

    The bundled table holds published Atari scores for three curiosity methods
    together with the standard random/human references. It is a fixture for
    metric checks, not output of this package.
    """
    if path is None:
        text = resources.files("dymecu").joinpath("data", REFERENCE_TABLE).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(text.splitlines())
    header = next(reader)
    if len(header) < 4 or [h.strip().lower() for h in header[1:3]] != ["random", "human"]:
        raise ContractError("score table header must be: task,random,human,<method>,...")
    methods = [h.strip() for h in header[3:]]
    rows = []
    for line in reader:
        if not line:
            continue
        vals = [float(v) for v in line[1:]]
        rows.append(ScoreRow(line[0].strip(), vals[0], vals[1], dict(zip(methods, vals[2:]))))
    return ScoreTable(methods, rows)


@dataclass
class Aggregate:
    method: str
    mean_hns: float
    n_sota: int
    mean_hns_without_flagged: float | None
    per_row: dict[str, float | None]
    flagged: list[str]
    excluded: list[str]


def n_sota(table: ScoreTable, method: str) -> int:
    """Rows where ``method`` strictly beats every other method."""
    others = [m for m in table.methods if m != method]
    return sum(all(r.scores[method] > r.scores[o] for o in others) for r in table.rows)


def aggregate(table: ScoreTable, method: str) -> Aggregate:
    """Mean HNS and #SOTA of ``method``.

    Rows with human == random are excluded (with a warning). Rows where random
    exceeds human are kept in ``mean_hns`` but flagged; ``mean_hns_without_flagged``
    drops them as well.
    """
    if method not in table.methods:
        raise ContractError(f"unknown method {method!r}; table has {table.methods}")
    per_row: dict[str, float | None] = {}
    flagged, excluded = [], []
    for r in table.rows:
        try:
            per_row[r.task] = hns(r.scores[method], r.random, r.human)
        except DegenerateRowError:
            warnings.warn(f"{r.task}: human == random, row excluded from means", stacklevel=2)
            per_row[r.task] = None
            excluded.append(r.task)
            continue
        if r.inverted:
            flagged.append(r.task)
    valid = [v for v in per_row.values() if v is not None]
    if not valid:
        raise ContractError("no valid rows to aggregate")
    clean = [per_row[r.task] for r in table.rows if per_row[r.task] is not None and r.task not in flagged]
    return Aggregate(
        method=method,
        mean_hns=sum(valid) / len(valid),
        n_sota=n_sota(table, method),
        mean_hns_without_flagged=sum(clean) / len(clean) if clean else None,
        per_row=per_row,
        flagged=flagged,
        excluded=excluded,
    )


def bns_table(
    rows: list[dict[str, float]], method: str, baselines: list[str], random_key: str = "random"
) -> tuple[list[float | None], float | None]:
    """Per-row BNS of ``method`` against the mean of ``baselines``; degenerate rows give None."""
    out: list[float | None] = []
    for row in rows:
        avg = sum(row[b] for b in baselines) / len(baselines)
        try:
            out.append(bns(row[method], row[random_key], avg))
        except DegenerateRowError:
            out.append(None)
    valid = [v for v in out if v is not None]
    return out, (sum(valid) / len(valid) if valid else None)
