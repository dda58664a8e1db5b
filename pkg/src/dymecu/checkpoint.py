"""Self-describing ``.npz`` checkpoints.

Arrays are stored under ``curiosity/<key>`` and ``policy/<key>``; everything
else (module type, specs, alpha, optimizer counters, running reward stats)
lives in a JSON string under ``__meta__``. Parameters round-trip bit-exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from dymecu.curiosity import CuriosityModule, DyMeCu, _get_opt, _put_opt, _spec_meta
from dymecu.nn_core import MlpSpec

FORMAT = "dymecu-checkpoint/1"


def _spec(meta: dict[str, Any]) -> MlpSpec:
    return MlpSpec(meta["input_dim"], tuple(meta["hidden_dims"]), meta["output_dim"], meta["activation"])


def save(path: str | Path, module: CuriosityModule, policy=None, extra: dict[str, Any] | None = None) -> Path:
    arrays, meta = module.state_dict()
    out = {f"curiosity/{k}": np.asarray(v) for k, v in arrays.items()}
    full_meta: dict[str, Any] = {"format": FORMAT, "curiosity": meta, "extra": extra or {}}
    if policy is not None:
        pmeta: dict[str, Any] = {"policy_spec": _spec_meta(policy.policy_spec), "value_spec": _spec_meta(policy.value_spec)}
        parrays = {"policy": policy.policy.values, "value": policy.value.values}
        _put_opt(parrays, pmeta, "policy_opt", policy.policy_opt)
        _put_opt(parrays, pmeta, "value_opt", policy.value_opt)
        out.update({f"policy/{k}": v for k, v in parrays.items()})
        full_meta["policy"] = pmeta
    out["__meta__"] = np.array(json.dumps(full_meta, sort_keys=True))
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **out)
    return path


def read(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: np.array(data[k]) for k in data.files if k != "__meta__"}
        meta = json.loads(str(data["__meta__"]))
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    return arrays, meta


def _section(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


def load_into(path: str | Path, module: CuriosityModule, policy=None) -> dict[str, Any]:
    """Restore state into already-constructed objects of matching shape; returns the metadata."""
    arrays, meta = read(path)
    module.load_state_dict(_section(arrays, "curiosity"), meta["curiosity"])
    if policy is not None and "policy" in meta:
        parrays = _section(arrays, "policy")
        policy.policy = policy.policy.like(parrays["policy"])
        policy.value = policy.value.like(parrays["value"])
        policy.policy_opt = _get_opt(parrays, meta["policy"], "policy_opt")
        policy.value_opt = _get_opt(parrays, meta["policy"], "value_opt")
    return meta


def load_dymecu(path: str | Path) -> DyMeCu:
    """Rebuild a DyMeCu module from the checkpoint alone."""
    arrays, meta = read(path)
    cm = meta["curiosity"]
    if cm["module"] != "dymecu":
        raise ValueError(f"checkpoint holds a {cm['module']!r} module")
    spec = _spec(cm["spec"])
    module = DyMeCu(
        spec,
        seed=cm["seed"],
        alpha=cm["alpha"],
        lr=cm["lr"],
        variant=cm["variant"],
        source=cm["source"],
        extra_hidden=() if cm["head_spec"] is None else cm["head_spec"]["hidden_dims"],
        normalize=cm["normalize"],
        optimizer=cm["optimizer"],
    )
    module.load_state_dict(_section(arrays, "curiosity"), cm)
    return module


__all__ = ["save", "read", "load_into", "load_dymecu"]
