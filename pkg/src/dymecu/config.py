"""Run configuration: typed dataclasses and a canonical TOML-subset text format.

A config file has four tables, ``[run]``, ``[env]``, ``[curiosity]`` and
``[ppo]``, holding only scalars and flat lists. Unknown tables or keys are
rejected with the offending line number. ``dumps`` writes fields in declaration
order with a units comment, so ``loads(dumps(cfg)) == cfg`` exactly.

Seed policy: a run seed ``s`` derives every RNG stream through fixed offsets
(see ``derive_seeds``), so two runs that differ only in, say, the curiosity
variant see the same environment and policy initialization.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

MODULES = (
    "dymecu",
    "dymecu_one_learner",
    "dymecu_one_source",
    "dymecu_predictor_heads",
    "rnd",
    "icm",
    "disagreement",
    "none",
)
MODES = ("joint", "pretrain_then_finetune")

SEED_OFFSETS = {"env": 0, "policy": 1000, "curiosity": 2000, "rollout": 3000, "minibatch": 4000}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}" if line is not None else message)


def derive_seeds(seed: int) -> dict[str, int]:
    """Per-stream seeds. Curiosity modules further offset theirs: learner 1 +0,
    learner 2 +1, memory +2, predictor heads +3/+4."""
    return {name: seed + off for name, off in SEED_OFFSETS.items()}


@dataclass
class EnvConfig:
    kind: str = field(default="grid", metadata={"unit": "grid | chain"})
    width: int = field(default=20, metadata={"unit": "cells"})
    height: int = field(default=20, metadata={"unit": "cells"})
    goal_x: int = field(default=-1, metadata={"unit": "cell index, negative counts from the far edge"})
    goal_y: int = field(default=-1, metadata={"unit": "cell index, negative counts from the far edge"})
    max_steps: int = field(default=200, metadata={"unit": "env steps per episode"})
    one_hot: bool = field(default=True, metadata={"unit": "append a one-hot cell code to the observation"})
    reward_mode: str = field(default="sparse", metadata={"unit": "sparse | dense"})
    chain_n: int = field(default=10, metadata={"unit": "states"})
    slip: float = field(default=0.0, metadata={"unit": "probability"})


@dataclass
class CuriosityConfig:
    module: str = field(default="dymecu", metadata={"unit": " | ".join(MODULES)})
    alpha: float = field(default=0.99, metadata={"unit": "EMA decay per learner step"})
    latent_dim: int = field(default=32, metadata={"unit": "units"})
    hidden: list[int] = field(default_factory=lambda: [64, 64], metadata={"unit": "units per layer"})
    activation: str = field(default="relu", metadata={"unit": "relu | tanh"})
    lr: float = field(default=1e-3, metadata={"unit": "Adam step size"})
    normalize: bool = field(default=True, metadata={"unit": "divide rewards by running RMS"})
    extra_hidden: list[int] = field(default_factory=lambda: [32, 32], metadata={"unit": "head units (predictor_heads only)"})
    source: str = field(default="learner1", metadata={"unit": "learner1 | learner2 (one_source only)"})
    memory_init: str = field(default="independent", metadata={"unit": "independent | average"})
    epochs: int = field(default=4, metadata={"unit": "passes over each rollout"})
    minibatch: int = field(default=256, metadata={"unit": "transitions"})
    icm_forward_weight: float = field(default=0.2, metadata={"unit": "weight of forward loss"})
    ensemble_size: int = field(default=5, metadata={"unit": "members"})


@dataclass
class PpoConfig:
    gamma: float = field(default=0.99, metadata={"unit": "discount per step"})
    lambda_gae: float = field(default=0.95, metadata={"unit": "GAE lambda"})
    clip_eps: float = field(default=0.2, metadata={"unit": "ratio clip"})
    epochs: int = field(default=4, metadata={"unit": "passes over each rollout"})
    minibatch: int = field(default=256, metadata={"unit": "transitions"})
    zeta: float = field(default=1.0, metadata={"unit": "intrinsic reward coefficient"})
    beta: float = field(default=2.0, metadata={"unit": "extrinsic reward coefficient"})
    entropy_coef: float = field(default=0.01, metadata={"unit": "loss weight"})
    value_coef: float = field(default=0.5, metadata={"unit": "loss weight"})
    lr: float = field(default=3e-4, metadata={"unit": "Adam step size"})
    rollout_steps: int = field(default=2048, metadata={"unit": "env steps per iteration"})
    hidden: list[int] = field(default_factory=lambda: [64, 64], metadata={"unit": "units per layer"})
    max_grad_norm: float = field(default=0.5, metadata={"unit": "global L2 norm, 0 disables"})


@dataclass
class RunSection:
    name: str = field(default="run", metadata={"unit": "label"})
    seeds: list[int] = field(default_factory=lambda: [0], metadata={"unit": "run seeds"})
    total_steps: int = field(default=50_000, metadata={"unit": "env steps, both phases included"})
    mode: str = field(default="joint", metadata={"unit": " | ".join(MODES)})
    pretrain_steps: int = field(default=0, metadata={"unit": "env steps (pretrain_then_finetune only)"})
    output_dir: str = field(default="runs", metadata={"unit": "path, relative to the output root"})
    workers: int = field(default=1, metadata={"unit": "parallel seed processes"})


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvConfig = field(default_factory=EnvConfig)
    curiosity: CuriosityConfig = field(default_factory=CuriosityConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def replace(self, **sections: dict[str, Any]) -> RunConfig:
        """Copy with per-section field overrides, e.g. ``cfg.replace(ppo={"zeta": 0.0})``."""
        out = {}
        for f in fields(self):
            sec = getattr(self, f.name)
            out[f.name] = dataclasses.replace(sec, **sections.get(f.name, {}))
        unknown = set(sections) - set(out)
        if unknown:
            raise ConfigError(f"unknown sections {sorted(unknown)}")
        return RunConfig(**out)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return dataclasses.asdict(self)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def dumps(cfg: RunConfig) -> str:
    lines = []
    for sec_field in fields(cfg):
        sec = getattr(cfg, sec_field.name)
        if lines:
            lines.append("")
        lines.append(f"[{sec_field.name}]")
        for f in fields(sec):
            unit = f.metadata.get("unit")
            line = f"{f.name} = {_fmt(getattr(sec, f.name))}"
            lines.append(f"{line}  # {unit}" if unit else line)
    return "\n".join(lines) + "\n"


def _find_line(text: str, section: str, key: str | None) -> int | None:
    current = None
    for i, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        m = re.match(r"^\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return i
    return None


def _coerce(value: Any, f: dataclasses.Field, where: str, line: int | None) -> Any:
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean", line)
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer", line)
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number", line)
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string", line)
        return value
    if kind == "list[int]":
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(f"{where} must be a list of integers", line)
        return list(value)
    raise ConfigError(f"{where}: unsupported field type {kind}", line)


def loads(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"syntax error: {exc}", int(m.group(1)) if m else None) from None
    sections = {}
    for name, value in raw.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]", _find_line(text, name, None) or _find_line(text, "", name))
        if not isinstance(value, dict):
            raise ConfigError(f"{name} must be a table", _find_line(text, "", name))
        default = SECTIONS[name]()
        known = {f.name: f for f in fields(default)}
        kwargs = {}
        for key, val in value.items():
            line = _find_line(text, name, key)
            if key not in known:
                raise ConfigError(f"unknown field {name}.{key}", line)
            kwargs[key] = _coerce(val, known[key], f"{name}.{key}", line)
        sections[name] = dataclasses.replace(default, **kwargs)
    cfg = RunConfig(**sections)
    validate(cfg, text)
    return cfg


def load(path: str | Path) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def validate(cfg: RunConfig, text: str | None = None) -> None:
    """Raise ``ConfigError`` for any inconsistency, before anything is trained."""

    def fail(section: str, key: str, msg: str) -> None:
        raise ConfigError(f"{section}.{key}: {msg}", _find_line(text, section, key) if text else None)

    r, e, c, p = cfg.run, cfg.env, cfg.curiosity, cfg.ppo
    if not r.seeds:
        fail("run", "seeds", "at least one seed is required")
    if len(set(r.seeds)) != len(r.seeds):
        fail("run", "seeds", "seeds must be distinct")
    if r.total_steps < 1:
        fail("run", "total_steps", "must be positive")
    if r.mode not in MODES:
        fail("run", "mode", f"must be one of {MODES}")
    if r.mode == "pretrain_then_finetune" and not 0 < r.pretrain_steps < r.total_steps:
        fail("run", "pretrain_steps", "must lie strictly between 0 and total_steps")
    if r.workers < 1:
        fail("run", "workers", "must be >= 1")
    if e.kind not in ("grid", "chain"):
        fail("env", "kind", "must be grid or chain")
    if e.width < 1 or e.height < 1:
        fail("env", "width", "grid dimensions must be positive")
    if not -e.width <= e.goal_x < e.width:
        fail("env", "goal_x", "outside the grid")
    if not -e.height <= e.goal_y < e.height:
        fail("env", "goal_y", "outside the grid")
    if e.max_steps < 1:
        fail("env", "max_steps", "must be positive")
    if e.reward_mode not in ("sparse", "dense"):
        fail("env", "reward_mode", "must be sparse or dense")
    if e.chain_n < 2:
        fail("env", "chain_n", "must be >= 2")
    if not 0.0 <= e.slip <= 1.0:
        fail("env", "slip", "must lie in [0, 1]")
    if c.module not in MODULES:
        fail("curiosity", "module", f"must be one of {MODULES}")
    if not 0.0 <= c.alpha <= 1.0:
        fail("curiosity", "alpha", "must lie in [0, 1]")
    if c.latent_dim < 1:
        fail("curiosity", "latent_dim", "must be positive")
    if any(h < 1 for h in c.hidden):
        fail("curiosity", "hidden", "widths must be positive")
    if c.activation not in ("relu", "tanh"):
        fail("curiosity", "activation", "must be relu or tanh")
    if c.lr < 0:
        fail("curiosity", "lr", "must be non-negative")
    if c.module == "dymecu_predictor_heads" and (not c.extra_hidden or any(h < 1 for h in c.extra_hidden)):
        fail("curiosity", "extra_hidden", "predictor heads need a non-empty list of positive widths")
    if c.source not in ("learner1", "learner2"):
        fail("curiosity", "source", "must be learner1 or learner2")
    if c.memory_init not in ("independent", "average"):
        fail("curiosity", "memory_init", "must be independent or average")
    if c.epochs < 0:
        fail("curiosity", "epochs", "must be >= 0")
    if c.minibatch < 1:
        fail("curiosity", "minibatch", "must be positive")
    if not 0.0 <= c.icm_forward_weight <= 1.0:
        fail("curiosity", "icm_forward_weight", "must lie in [0, 1]")
    if c.ensemble_size < 2:
        fail("curiosity", "ensemble_size", "must be >= 2")
    if not 0.0 < p.gamma <= 1.0:
        fail("ppo", "gamma", "must lie in (0, 1]")
    if not 0.0 <= p.lambda_gae <= 1.0:
        fail("ppo", "lambda_gae", "must lie in [0, 1]")
    if p.clip_eps <= 0:
        fail("ppo", "clip_eps", "must be positive")
    if p.epochs < 1:
        fail("ppo", "epochs", "must be >= 1")
    if p.minibatch < 1:
        fail("ppo", "minibatch", "must be positive")
    if p.zeta < 0:
        fail("ppo", "zeta", "must be >= 0")
    if p.beta < 0:
        fail("ppo", "beta", "must be >= 0")
    if p.entropy_coef < 0 or p.value_coef < 0:
        fail("ppo", "entropy_coef" if p.entropy_coef < 0 else "value_coef", "must be >= 0")
    if p.lr < 0:
        fail("ppo", "lr", "must be non-negative")
    if p.rollout_steps < 1:
        fail("ppo", "rollout_steps", "must be positive")
    if any(h < 1 for h in p.hidden):
        fail("ppo", "hidden", "widths must be positive")
    if p.max_grad_norm < 0:
        fail("ppo", "max_grad_norm", "must be >= 0")
