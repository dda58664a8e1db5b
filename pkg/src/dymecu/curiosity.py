"""Dynamic-memory curiosity: two online learners regressed onto an EMA memory.

The intrinsic reward of a state is the squared gap between the two learners'
latent codes. Both learners are trained toward the memory's code for the same
state, and the memory drifts toward the learners' average by EMA after every
learner step, so states seen often end up with learners that agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from dymecu.nn_core import (
    ContractError,
    MlpSpec,
    OptState,
    ParamVector,
    ema_blend,
    forward,
    init_params,
    make_opt_state,
    optimizer_step,
    vjp,
)

VARIANTS = ("dual", "one_learner", "one_source")
SOURCES = ("learner1", "learner2")
NORM_EPS = 1e-8


@dataclass
class TransitionBatch:
    """Arrays of equal leading length; ``actions`` are integer indices."""

    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray

    def __len__(self) -> int:
        return len(self.obs)

    def subset(self, idx: np.ndarray) -> TransitionBatch:
        return TransitionBatch(self.obs[idx], self.actions[idx], self.next_obs[idx])


class RunningStat:
    """Streaming count/mean/M2 (Welford, merged batch-wise).

    ``scale`` is the root-mean-square of everything seen, sqrt(var + mean^2),
    so a constant stream normalizes to 1 rather than blowing up.
    """

    def __init__(self) -> None:
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values: np.ndarray | float) -> None:
        x = np.atleast_1d(np.asarray(values, dtype=np.float64))
        if x.size == 0:
            return
        n_b = x.size
        mean_b = float(x.mean())
        m2_b = float(((x - mean_b) ** 2).sum())
        n = self.count + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / n
        self.m2 += m2_b + delta * delta * self.count * n_b / n
        self.count = n

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count else 0.0

    @property
    def std(self) -> float:
        return float(np.sqrt(self.var))

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.var + self.mean * self.mean))

    def state(self) -> dict[str, float]:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    def load(self, state: dict[str, float]) -> None:
        self.count = int(state["count"])
        self.mean = float(state["mean"])
        self.m2 = float(state["m2"])


def squared_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise squared Euclidean distance (a scalar for 1-D inputs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).sum(axis=-1)


def intrinsic_reward(z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
    """Squared latent gap between the two learners."""
    return squared_distance(z1, z2)


def learner_losses(z1: np.ndarray, z2: np.ndarray, zw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Regression losses of each learner onto the memory code."""
    return squared_distance(z1, zw), squared_distance(z2, zw)


class CuriosityModule:
    """Common surface used by the training loop.

    Subclasses implement ``raw_rewards`` and ``update``; ``consolidate`` is a
    no-op unless the method keeps a slow memory.
    """

    name = "none"

    def __init__(self, normalize: bool = True) -> None:
        self.normalize = normalize
        self.reward_stat = RunningStat()

    def raw_rewards(self, batch: TransitionBatch) -> np.ndarray:
        return np.zeros(len(batch))

    def update(self, batch: TransitionBatch) -> dict[str, float]:
        return {}

    def consolidate(self) -> None:
        pass

    def normalize_rewards(self, raw: np.ndarray | float) -> np.ndarray | float:
        """Fold ``raw`` into the running statistics, then divide by the running scale."""
        if not self.normalize:
            return raw
        self.reward_stat.update(raw)
        return raw / (self.reward_stat.scale + NORM_EPS)

    # checkpointing: arrays go in ``arrays``, everything else must be JSON-able
    def state_dict(self) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
        return {}, {"module": self.name, "reward_stat": self.reward_stat.state(), "normalize": self.normalize}

    def load_state_dict(self, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
        self.reward_stat.load(meta["reward_stat"])


class NoCuriosity(CuriosityModule):
    name = "none"


def identity_head(latent_dim: int, depth: int = 2, activation: str = "relu") -> tuple[MlpSpec, ParamVector]:
    """A relu head that computes the identity exactly.

    Uses hidden width ``2 * latent_dim``: the first layer splits ``z`` into
    ``relu(z)`` and ``relu(-z)``, inner layers pass them through, and the output
    layer recombines them as ``relu(z) - relu(-z) = z``.
    """
    if activation != "relu":
        raise ContractError("an exact identity head needs relu activations")
    if depth < 1:
        raise ContractError("depth must be >= 1")
    d = latent_dim
    spec = MlpSpec(d, (2 * d,) * depth, d, activation)
    eye = np.eye(d)
    blocks = {"W0": np.vstack([eye, -eye])}
    for i in range(1, depth):
        blocks[f"W{i}"] = np.eye(2 * d)
    blocks[f"W{depth}"] = np.hstack([eye, -eye])
    flat = []
    for name, shape in spec.layout():
        flat.append(blocks[name].ravel() if name.startswith("W") else np.zeros(shape))
    return spec, ParamVector(np.concatenate(flat), spec.layout())


class DyMeCu(CuriosityModule):
    """Dual online learners, an EMA memory, and the ablation variants.

    ``variant``:
      * ``"dual"``: reward ``|f1(s) - f2(s)|^2``, memory tracks mean(theta1, theta2).
      * ``"one_learner"``: single learner, reward ``|f(s) - M(s)|^2``, memory tracks theta.
      * ``"one_source"``: dual reward, memory tracks only the learner named by ``source``.

    ``extra_hidden`` appends a trainable dense head (latent -> extra_hidden -> latent)
    to each learner; the memory keeps the base architecture and only the base
    parameters are consolidated into it.
    """

    name = "dymecu"

    def __init__(
        self,
        spec: MlpSpec,
        *,
        seed: int = 0,
        alpha: float = 0.99,
        lr: float = 1e-3,
        variant: str = "dual",
        source: str = "learner1",
        extra_hidden: Sequence[int] = (),
        memory_init: str = "independent",
        normalize: bool = True,
        optimizer: str = "adam",
    ) -> None:
        super().__init__(normalize)
        if variant not in VARIANTS:
            raise ContractError(f"unknown variant {variant!r}")
        if source not in SOURCES:
            raise ContractError(f"unknown source {source!r}")
        if not 0.0 <= alpha <= 1.0:
            raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
        if lr < 0:
            raise ContractError("lr must be non-negative")
        self.spec = spec
        self.alpha = float(alpha)
        self.lr = float(lr)
        self.variant = variant
        self.source = source
        self.seed = seed
        self.optimizer = optimizer
        self.theta1 = init_params(spec, seed)
        self.theta2 = None if variant == "one_learner" else init_params(spec, seed + 1)
        if memory_init == "independent":
            self.omega = init_params(spec, seed + 2)
        elif memory_init == "average":
            self.omega = ema_blend(self.theta1, self._learners(), 0.0)
        else:
            raise ContractError(f"unknown memory_init {memory_init!r}")
        self.opt1 = make_opt_state(self.theta1, optimizer)
        self.opt2 = None if self.theta2 is None else make_opt_state(self.theta2, optimizer)
        self.head_spec: MlpSpec | None = None
        self.head1: ParamVector | None = None
        self.head2: ParamVector | None = None
        self.head_opt1: OptState | None = None
        self.head_opt2: OptState | None = None
        if extra_hidden:
            self._attach_heads(extra_hidden)

    # -- construction helpers -------------------------------------------------

    def _learners(self) -> list[ParamVector]:
        return [self.theta1] if self.theta2 is None else [self.theta1, self.theta2]

    def _attach_heads(self, extra_hidden: Sequence[int], head_params: Sequence[ParamVector] | None = None) -> None:
        extra = tuple(int(h) for h in extra_hidden)
        if not extra or any(h < 1 for h in extra):
            raise ContractError("extra_hidden must be a non-empty list of positive widths")
        d = self.spec.output_dim
        if head_params is not None:
            head_spec = MlpSpec(d, extra, d, self.spec.activation)
            for p in head_params:
                if p.layout != head_spec.layout():
                    raise ContractError("head parameters do not map the latent back to the memory's output width")
        else:
            head_spec = MlpSpec(d, extra, d, self.spec.activation)
            head_params = [init_params(head_spec, self.seed + 3 + i) for i in range(len(self._learners()))]
        self.head_spec = head_spec
        self.head1 = head_params[0]
        self.head_opt1 = make_opt_state(self.head1, self.optimizer)
        if self.theta2 is not None:
            self.head2 = head_params[1] if len(head_params) > 1 else head_params[0].copy()
            self.head_opt2 = make_opt_state(self.head2, self.optimizer)

    def with_predictor_heads(
        self, extra_hidden: Sequence[int], head_params: Sequence[ParamVector] | None = None
    ) -> DyMeCu:
        """Copy of this module whose learners carry an extra trainable head."""
        out = self.copy()
        out._attach_heads(extra_hidden, head_params)
        return out

    def copy(self) -> DyMeCu:
        out = object.__new__(DyMeCu)
        out.__dict__.update(self.__dict__)
        for key, val in self.__dict__.items():
            if isinstance(val, (ParamVector, OptState)):
                setattr(out, key, val.copy())
        out.reward_stat = RunningStat()
        out.reward_stat.load(self.reward_stat.state())
        return out

    @property
    def n_learner_params(self) -> int:
        n = len(self.theta1)
        if self.head1 is not None:
            n += len(self.head1)
        return n

    # -- encoding and rewards -------------------------------------------------

    def _learner_out(self, theta: ParamVector, head: ParamVector | None, s: np.ndarray) -> np.ndarray:
        z = forward(self.spec, theta, s)
        if head is not None:
            z = forward(self.head_spec, head, z)
        return z

    def encode_all(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
        """Latent codes ``(z1, z2, zw)`` of ``s``; ``z2`` is None for the one-learner variant."""
        z1 = self._learner_out(self.theta1, self.head1, s)
        z2 = None if self.theta2 is None else self._learner_out(self.theta2, self.head2, s)
        zw = forward(self.spec, self.omega, s)
        return z1, z2, zw

    def reward(self, s: np.ndarray) -> np.ndarray:
        """Raw (unnormalized) intrinsic reward of one state or a batch of states."""
        z1, z2, zw = self.encode_all(s)
        if z2 is None:
            return squared_distance(z1, zw)
        return intrinsic_reward(z1, z2)

    def one_learner_reward(self, s: np.ndarray) -> np.ndarray:
        if self.variant != "one_learner":
            raise ContractError("one_learner_reward needs the one_learner variant")
        return self.reward(s)

    def raw_rewards(self, batch: TransitionBatch) -> np.ndarray:
        return np.atleast_1d(self.reward(batch.next_obs))

    # -- learning -------------------------------------------------------------

    def _step_learner(self, theta, head, opt, head_opt, s, zw):
        b = s.shape[0]
        z_base = forward(self.spec, theta, s)
        z = z_base if head is None else forward(self.head_spec, head, z_base)
        diff = z - zw
        loss = float((diff * diff).sum(axis=1).mean())
        upstream = 2.0 * diff / b
        if head is not None:
            g_head, upstream = vjp(self.head_spec, head, z_base, upstream)
            head, head_opt = optimizer_step(head, g_head, head_opt, self.lr)
        g, _ = vjp(self.spec, theta, s, upstream)
        theta, opt = optimizer_step(theta, g, opt, self.lr)
        return theta, head, opt, head_opt, loss

    def update_learners(self, states: np.ndarray) -> dict[str, float]:
        """One optimizer step per learner on the batch-mean regression loss.

        The memory code is a fixed target here; the memory only moves in
        ``consolidate_memory``.
        """
        s = np.asarray(states, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.shape[0] == 0:
            raise ContractError("update_learners needs a non-empty batch")
        zw = forward(self.spec, self.omega, s)
        self.theta1, self.head1, self.opt1, self.head_opt1, l1 = self._step_learner(
            self.theta1, self.head1, self.opt1, self.head_opt1, s, zw
        )
        out = {"loss_learner1": l1}
        if self.theta2 is not None:
            self.theta2, self.head2, self.opt2, self.head_opt2, l2 = self._step_learner(
                self.theta2, self.head2, self.opt2, self.head_opt2, s, zw
            )
            out["loss_learner2"] = l2
        return out

    def update(self, batch: TransitionBatch) -> dict[str, float]:
        return self.update_learners(batch.next_obs)

    def consolidate_memory(self) -> None:
        if self.variant == "one_source":
            self.consolidate_memory_one_source(self.source)
        else:
            self.omega = ema_blend(self.omega, self._learners(), self.alpha)

    def consolidate_memory_one_source(self, which: str) -> None:
        if self.theta2 is None:
            raise ContractError("single-source consolidation needs two learners")
        if which not in SOURCES:
            raise ContractError(f"unknown learner {which!r}")
        src = self.theta1 if which == "learner1" else self.theta2
        self.omega = ema_blend(self.omega, [src], self.alpha)

    def consolidate(self) -> None:
        self.consolidate_memory()

    # -- checkpointing --------------------------------------------------------

    def state_dict(self) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
        arrays, meta = super().state_dict()
        meta.update(
            spec=_spec_meta(self.spec),
            head_spec=None if self.head_spec is None else _spec_meta(self.head_spec),
            alpha=self.alpha,
            lr=self.lr,
            variant=self.variant,
            source=self.source,
            seed=self.seed,
            optimizer=self.optimizer,
        )
        for key in ("theta1", "theta2", "omega", "head1", "head2"):
            p = getattr(self, key)
            if p is not None:
                arrays[key] = p.values
        for key in ("opt1", "opt2", "head_opt1", "head_opt2"):
            _put_opt(arrays, meta, key, getattr(self, key))
        return arrays, meta

    def load_state_dict(self, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
        super().load_state_dict(arrays, meta)
        for key in ("theta1", "theta2", "omega", "head1", "head2"):
            cur = getattr(self, key)
            if cur is not None:
                setattr(self, key, cur.like(np.array(arrays[key])))
        for key in ("opt1", "opt2", "head_opt1", "head_opt2"):
            if getattr(self, key) is not None:
                setattr(self, key, _get_opt(arrays, meta, key))


def _spec_meta(spec: MlpSpec) -> dict[str, Any]:
    return {
        "input_dim": spec.input_dim,
        "hidden_dims": list(spec.hidden_dims),
        "output_dim": spec.output_dim,
        "activation": spec.activation,
    }


def _put_opt(arrays: dict[str, np.ndarray], meta: dict[str, Any], key: str, opt: OptState | None) -> None:
    if opt is None:
        return
    meta[key] = {"kind": opt.kind, "t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}
    if opt.m is not None:
        arrays[f"{key}.m"] = opt.m
        arrays[f"{key}.v"] = opt.v


def _get_opt(arrays: dict[str, np.ndarray], meta: dict[str, Any], key: str) -> OptState:
    info = meta[key]
    m = arrays.get(f"{key}.m")
    v = arrays.get(f"{key}.v")
    return OptState(
        info["kind"],
        None if m is None else np.array(m),
        None if v is None else np.array(v),
        int(info["t"]),
        info["beta1"],
        info["beta2"],
        info["eps"],
    )
