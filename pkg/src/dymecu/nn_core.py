"""Dense-network substrate: flat parameter storage, forward/backward passes,
first-order optimizers and EMA parameter blending.

Everything here is plain numpy in double precision. Networks are stateless
functions of ``(MlpSpec, ParamVector, x)``; the only mutable thing a caller
ever holds is the ``ParamVector`` (and optimizer moments).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class ContractError(ValueError):
    """Raised when an operation is called with arguments violating its contract."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    _layout: Layout = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ContractError(f"all layer widths must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        w = self.widths
        layout = []
        for i in range(self.n_layers):
            layout.append((f"W{i}", (w[i + 1], w[i])))
            layout.append((f"b{i}", (w[i + 1],)))
        object.__setattr__(self, "_layout", tuple(layout))

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def layout(self) -> Layout:
        return self._layout

    @property
    def n_params(self) -> int:
        return layout_size(self.layout())


def layout_size(layout: Layout) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout)


@dataclass(eq=False)
class ParamVector:
    """Flat float64 parameter array plus the (name, shape) layout that slices it."""

    values: np.ndarray
    layout: Layout
    _slices: dict[str, tuple[int, int, tuple[int, ...]]] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != layout_size(self.layout):
            raise ContractError(
                f"values of length {self.values.size} do not match layout size {layout_size(self.layout)}"
            )
        slices, pos = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            slices[name] = (pos, pos + n, shape)
            pos += n
        self._slices = slices

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop, shape = self._slices[name]
        return self.values[start:stop].reshape(shape)

    def __len__(self) -> int:
        return self.values.size

    def copy(self) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout)

    def like(self, values: np.ndarray) -> ParamVector:
        return ParamVector(values, self.layout)

    def same_layout(self, other: ParamVector) -> bool:
        return self.layout == other.layout

    def equals(self, other: ParamVector) -> bool:
        return self.same_layout(other) and np.array_equal(self.values, other.values)


def _check_layout(a: ParamVector, b: ParamVector) -> None:
    if not a.same_layout(b):
        raise ContractError("parameter layouts differ")


def init_params(spec: MlpSpec, seed: int | np.random.Generator, scheme: str = "fan_in") -> ParamVector:
    """Seeded initialization.

    ``fan_in`` draws every weight and bias of a layer from
    ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; ``zeros`` gives the all-zero network.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if scheme == "zeros":
        return ParamVector(np.zeros(spec.n_params), spec.layout())
    if scheme != "fan_in":
        raise ContractError(f"unknown init scheme {scheme!r}")
    chunks = []
    for name, shape in spec.layout():
        fan_in = shape[1] if name.startswith("W") else spec.widths[int(name[1:])]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    return ParamVector(np.concatenate(chunks), spec.layout())


def _act(name: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post * post


def _check_params(spec: MlpSpec, params: ParamVector) -> None:
    if params.layout is not spec._layout and params.layout != spec._layout:
        raise ContractError("params do not match the spec layout")


def _as_batch(spec: MlpSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != spec.input_dim:
        raise ContractError(f"expected input of width {spec.input_dim}, got shape {x.shape}")
    return xb, single


def _forward_cache(spec: MlpSpec, params: ParamVector, xb: np.ndarray):
    pres, posts = [], [xb]
    h = xb
    last = spec.n_layers - 1
    for i in range(spec.n_layers):
        pre = h @ params[f"W{i}"].T + params[f"b{i}"]
        h = pre if i == last else _act(spec.activation, pre)
        pres.append(pre)
        posts.append(h)
    return pres, posts


def forward(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Evaluate the network. ``x`` may be one vector or a ``(batch, input_dim)`` matrix.

    Hidden layers use ``spec.activation``; the output layer is linear.
    """
    _check_params(spec, params)
    xb, single = _as_batch(spec, x)
    _, posts = _forward_cache(spec, params, xb)
    return posts[-1][0] if single else posts[-1]


def vjp(
    spec: MlpSpec, params: ParamVector, x: np.ndarray, upstream: np.ndarray
) -> tuple[ParamVector, np.ndarray]:
    """Vector-Jacobian product of the network output.

    Returns the parameter gradient of ``sum(upstream * forward(x))`` (summed over
    the batch) and the gradient with respect to ``x``.
    """
    _check_params(spec, params)
    xb, single = _as_batch(spec, x)
    up = np.asarray(upstream, dtype=np.float64)
    up = up[None, :] if up.ndim == 1 else up
    if up.shape != (xb.shape[0], spec.output_dim):
        raise ContractError(f"upstream shape {up.shape} does not match output ({xb.shape[0]}, {spec.output_dim})")
    pres, posts = _forward_cache(spec, params, xb)
    grads: dict[str, np.ndarray] = {}
    delta = up
    for i in reversed(range(spec.n_layers)):
        if i != spec.n_layers - 1:
            delta = delta * _act_grad(spec.activation, pres[i], posts[i + 1])
        grads[f"W{i}"] = delta.T @ posts[i]
        grads[f"b{i}"] = delta.sum(axis=0)
        delta = delta @ params[f"W{i}"]
    flat = np.concatenate([grads[name].ravel() for name, _ in spec.layout()])
    dx = delta[0] if single else delta
    return ParamVector(flat, params.layout), dx


def backward(spec: MlpSpec, params: ParamVector, x: np.ndarray, upstream: np.ndarray) -> ParamVector:
    """Parameter gradient of ``sum(upstream * forward(x))``."""
    return vjp(spec, params, x, upstream)[0]


@dataclass
class OptState:
    """Optimizer moments. ``kind`` is ``"adam"`` or ``"sgd"`` (sgd carries nothing)."""

    kind: str = "adam"
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self) -> OptState:
        return OptState(
            self.kind,
            None if self.m is None else self.m.copy(),
            None if self.v is None else self.v.copy(),
            self.t,
            self.beta1,
            self.beta2,
            self.eps,
        )


def make_opt_state(params: ParamVector, kind: str = "adam") -> OptState:
    if kind == "sgd":
        return OptState(kind="sgd")
    if kind != "adam":
        raise ContractError(f"unknown optimizer {kind!r}")
    return OptState(kind="adam", m=np.zeros_like(params.values), v=np.zeros_like(params.values))


def optimizer_step(
    params: ParamVector, grad: ParamVector, state: OptState, lr: float
) -> tuple[ParamVector, OptState]:
    """One descent step. Pure: inputs are not modified."""
    _check_layout(params, grad)
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    if state.kind == "sgd":
        return params.like(params.values - lr * grad.values), state
    if state.m is None or state.m.size != params.values.size:
        raise ContractError("optimizer state does not match the parameter layout")
    t = state.t + 1
    g = grad.values
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.like(new), OptState("adam", m, v, t, state.beta1, state.beta2, state.eps)


def clip_grad_norm(grad: ParamVector, max_norm: float | None) -> ParamVector:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad.values))
    if norm <= max_norm or norm == 0.0:
        return grad
    return grad.like(grad.values * (max_norm / norm))


def ema_blend(target: ParamVector, sources: Sequence[ParamVector], alpha: float) -> ParamVector:
    """``alpha * target + (1 - alpha) * mean(sources)``, element-wise."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    if not sources:
        raise ContractError("ema_blend needs at least one source")
    for s in sources:
        _check_layout(target, s)
    total = sources[0].values.copy()
    for s in sources[1:]:
        total = total + s.values
    mean = total / len(sources)
    return target.like(alpha * target.values + (1.0 - alpha) * mean)
