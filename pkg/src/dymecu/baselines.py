"""Desk-scale versions of three standard curiosity bonuses.

* ``Rnd``: distill a frozen random network; reward is the distillation error.
* ``Icm``: learned features with forward and inverse dynamics heads; reward is
  the forward model's error in feature space.
* ``Disagreement``: an ensemble of forward models over frozen random features;
  reward is the variance of their predictions.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from dymecu.curiosity import CuriosityModule, TransitionBatch, _get_opt, _put_opt, squared_distance
from dymecu.nn_core import (
    ContractError,
    MlpSpec,
    ParamVector,
    forward,
    init_params,
    make_opt_state,
    optimizer_step,
    vjp,
)


def one_hot(actions: np.ndarray | int, n_actions: int) -> np.ndarray:
    a = np.atleast_1d(np.asarray(actions))
    if a.size and (a.min() < 0 or a.max() >= n_actions or not np.issubdtype(a.dtype, np.integer)):
        raise ContractError(f"actions must be integers in [0, {n_actions})")
    out = np.zeros((a.size, n_actions))
    out[np.arange(a.size), a] = 1.0
    return out


def _check_one_hot(a: np.ndarray, n_actions: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a2 = a[None, :] if a.ndim == 1 else a
    if a2.shape[1] != n_actions:
        raise ContractError(f"action encoding has arity {a2.shape[1]}, expected {n_actions}")
    if not (np.all((a2 == 0.0) | (a2 == 1.0)) and np.all(a2.sum(axis=1) == 1.0)):
        raise ContractError("actions must be one-hot rows")
    return a2


def _rows(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


class Rnd(CuriosityModule):
    name = "rnd"

    def __init__(self, spec: MlpSpec, *, seed: int = 0, lr: float = 1e-3, normalize: bool = True) -> None:
        super().__init__(normalize)
        self.spec = spec
        self.lr = lr
        self.target = init_params(spec, seed)
        self.predictor = init_params(spec, seed + 1)
        self.opt = make_opt_state(self.predictor)

    def reward(self, s: np.ndarray) -> np.ndarray:
        return squared_distance(forward(self.spec, self.predictor, s), forward(self.spec, self.target, s))

    def raw_rewards(self, batch: TransitionBatch) -> np.ndarray:
        return np.atleast_1d(self.reward(batch.next_obs))

    def train_step(self, states: np.ndarray) -> float:
        s, _ = _rows(states)
        diff = forward(self.spec, self.predictor, s) - forward(self.spec, self.target, s)
        g = vjp(self.spec, self.predictor, s, 2.0 * diff / s.shape[0])[0]
        self.predictor, self.opt = optimizer_step(self.predictor, g, self.opt, self.lr)
        return float((diff * diff).sum(axis=1).mean())

    def update(self, batch: TransitionBatch) -> dict[str, float]:
        return {"loss_predictor": self.train_step(batch.next_obs)}

    def state_dict(self):
        arrays, meta = super().state_dict()
        arrays.update(target=self.target.values, predictor=self.predictor.values)
        _put_opt(arrays, meta, "opt", self.opt)
        return arrays, meta

    def load_state_dict(self, arrays, meta) -> None:
        super().load_state_dict(arrays, meta)
        self.target = self.target.like(np.array(arrays["target"]))
        self.predictor = self.predictor.like(np.array(arrays["predictor"]))
        self.opt = _get_opt(arrays, meta, "opt")


class Icm(CuriosityModule):
    """Feature encoder shared by a forward model (weight ``forward_weight``) and an
    inverse model (weight ``1 - forward_weight``, softmax cross-entropy).

    The forward target ``phi(s')`` is treated as a constant.
    """

    name = "icm"

    def __init__(
        self,
        obs_dim: int,
        n_actions: int,
        *,
        feature_dim: int = 32,
        hidden: Sequence[int] = (64,),
        seed: int = 0,
        lr: float = 1e-3,
        forward_weight: float = 0.2,
        normalize: bool = True,
        activation: str = "relu",
    ) -> None:
        super().__init__(normalize)
        self.n_actions = n_actions
        self.lr = lr
        self.forward_weight = forward_weight
        hidden = tuple(hidden)
        self.enc_spec = MlpSpec(obs_dim, hidden, feature_dim, activation)
        self.fwd_spec = MlpSpec(feature_dim + n_actions, hidden, feature_dim, activation)
        self.inv_spec = MlpSpec(2 * feature_dim, hidden, n_actions, activation)
        self.encoder = init_params(self.enc_spec, seed)
        self.forward_model = init_params(self.fwd_spec, seed + 1)
        self.inverse_model = init_params(self.inv_spec, seed + 2)
        self.opt_enc = make_opt_state(self.encoder)
        self.opt_fwd = make_opt_state(self.forward_model)
        self.opt_inv = make_opt_state(self.inverse_model)

    def encode(self, s: np.ndarray) -> np.ndarray:
        return forward(self.enc_spec, self.encoder, s)

    def predict_next(self, s: np.ndarray, a_onehot: np.ndarray) -> np.ndarray:
        a = _check_one_hot(a_onehot, self.n_actions)
        phi, single = _rows(self.encode(s))
        out = forward(self.fwd_spec, self.forward_model, np.hstack([phi, a]))
        return out[0] if single else out

    def reward(self, s: np.ndarray, a_onehot: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        return squared_distance(self.predict_next(s, a_onehot), self.encode(s_next))

    def raw_rewards(self, batch: TransitionBatch) -> np.ndarray:
        return np.atleast_1d(self.reward(batch.obs, one_hot(batch.actions, self.n_actions), batch.next_obs))

    def losses_and_grads(self, s, a_onehot, s_next, train_encoder: bool = True):
        s, _ = _rows(s)
        s_next, _ = _rows(s_next)
        a = _check_one_hot(a_onehot, self.n_actions)
        b = s.shape[0]
        phi = forward(self.enc_spec, self.encoder, s)
        phi_next = forward(self.enc_spec, self.encoder, s_next)

        fwd_in = np.hstack([phi, a])
        pred = forward(self.fwd_spec, self.forward_model, fwd_in)
        diff = pred - phi_next
        l_fwd = float((diff * diff).sum(axis=1).mean())
        g_fwd, d_fwd_in = vjp(self.fwd_spec, self.forward_model, fwd_in, self.forward_weight * 2.0 * diff / b)

        inv_in = np.hstack([phi, phi_next])
        logits = forward(self.inv_spec, self.inverse_model, inv_in)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        l_inv = float(-(a * np.log(p + 1e-300)).sum(axis=1).mean())
        g_inv, d_inv_in = vjp(self.inv_spec, self.inverse_model, inv_in, (1.0 - self.forward_weight) * (p - a) / b)

        fd = phi.shape[1]
        g_enc = None
        if train_encoder:
            g_enc = vjp(self.enc_spec, self.encoder, s, d_fwd_in[:, :fd] + d_inv_in[:, :fd])[0]
            g_enc_next = vjp(self.enc_spec, self.encoder, s_next, d_inv_in[:, fd:])[0]
            g_enc = g_enc.like(g_enc.values + g_enc_next.values)
        return {"loss_forward": l_fwd, "loss_inverse": l_inv}, (g_enc, g_fwd, g_inv)

    def train_step(self, s, a_onehot, s_next, train_encoder: bool = True) -> dict[str, float]:
        losses, (g_enc, g_fwd, g_inv) = self.losses_and_grads(s, a_onehot, s_next, train_encoder)
        if g_enc is not None:
            self.encoder, self.opt_enc = optimizer_step(self.encoder, g_enc, self.opt_enc, self.lr)
        self.forward_model, self.opt_fwd = optimizer_step(self.forward_model, g_fwd, self.opt_fwd, self.lr)
        self.inverse_model, self.opt_inv = optimizer_step(self.inverse_model, g_inv, self.opt_inv, self.lr)
        return losses

    def update(self, batch: TransitionBatch) -> dict[str, float]:
        return self.train_step(batch.obs, one_hot(batch.actions, self.n_actions), batch.next_obs)

    def state_dict(self):
        arrays, meta = super().state_dict()
        arrays.update(
            encoder=self.encoder.values, forward_model=self.forward_model.values, inverse_model=self.inverse_model.values
        )
        for key in ("opt_enc", "opt_fwd", "opt_inv"):
            _put_opt(arrays, meta, key, getattr(self, key))
        return arrays, meta

    def load_state_dict(self, arrays, meta) -> None:
        super().load_state_dict(arrays, meta)
        for key in ("encoder", "forward_model", "inverse_model"):
            setattr(self, key, getattr(self, key).like(np.array(arrays[key])))
        for key in ("opt_enc", "opt_fwd", "opt_inv"):
            setattr(self, key, _get_opt(arrays, meta, key))


def ensemble_variance(predictions: np.ndarray) -> np.ndarray:
    """Mean over latent dims of the population variance across members.

    ``predictions`` has shape ``(K, latent)`` or ``(K, batch, latent)``.
    """
    p = np.asarray(predictions, dtype=np.float64)
    if p.shape[0] < 2:
        raise ContractError("ensemble variance needs at least two members")
    # shifted by the first member so identical members give exactly zero
    d = p - p[0]
    var = (d * d).mean(axis=0) - d.mean(axis=0) ** 2
    return np.maximum(var, 0.0).mean(axis=-1)


class Disagreement(CuriosityModule):
    """Ensemble of ``ensemble_size`` forward models on frozen random features.

    Each member trains on its own bootstrap resample of every batch.
    """

    name = "disagreement"

    def __init__(
        self,
        obs_dim: int,
        n_actions: int,
        *,
        feature_dim: int = 32,
        hidden: Sequence[int] = (64,),
        ensemble_size: int = 5,
        seed: int = 0,
        lr: float = 1e-3,
        normalize: bool = True,
        activation: str = "relu",
    ) -> None:
        super().__init__(normalize)
        if ensemble_size < 2:
            raise ContractError("ensemble_size must be >= 2")
        self.n_actions = n_actions
        self.lr = lr
        hidden = tuple(hidden)
        self.enc_spec = MlpSpec(obs_dim, hidden, feature_dim, activation)
        self.fwd_spec = MlpSpec(feature_dim + n_actions, hidden, feature_dim, activation)
        self.encoder = init_params(self.enc_spec, seed)
        self.ensemble = [init_params(self.fwd_spec, seed + 1 + k) for k in range(ensemble_size)]
        self.opts = [make_opt_state(m) for m in self.ensemble]
        self.rng = np.random.default_rng(seed + 1 + ensemble_size)

    def predictions(self, s: np.ndarray, a_onehot: np.ndarray) -> np.ndarray:
        a = _check_one_hot(a_onehot, self.n_actions)
        phi, single = _rows(forward(self.enc_spec, self.encoder, s))
        x = np.hstack([phi, a])
        out = np.stack([forward(self.fwd_spec, m, x) for m in self.ensemble])
        return out[:, 0] if single else out

    def reward(self, s: np.ndarray, a_onehot: np.ndarray) -> np.ndarray:
        if len(self.ensemble) < 2:
            raise ContractError("ensemble_size must be >= 2")
        return ensemble_variance(self.predictions(s, a_onehot))

    def raw_rewards(self, batch: TransitionBatch) -> np.ndarray:
        return np.atleast_1d(self.reward(batch.obs, one_hot(batch.actions, self.n_actions)))

    def train_step(self, s, a_onehot, s_next) -> float:
        s, _ = _rows(s)
        s_next, _ = _rows(s_next)
        a = _check_one_hot(a_onehot, self.n_actions)
        x = np.hstack([forward(self.enc_spec, self.encoder, s), a])
        y = forward(self.enc_spec, self.encoder, s_next)
        n = x.shape[0]
        total = 0.0
        for k, member in enumerate(self.ensemble):
            idx = self.rng.integers(0, n, size=n)
            diff = forward(self.fwd_spec, member, x[idx]) - y[idx]
            g = vjp(self.fwd_spec, member, x[idx], 2.0 * diff / n)[0]
            self.ensemble[k], self.opts[k] = optimizer_step(member, g, self.opts[k], self.lr)
            total += float((diff * diff).sum(axis=1).mean())
        return total / len(self.ensemble)

    def update(self, batch: TransitionBatch) -> dict[str, float]:
        return {"loss_ensemble": self.train_step(batch.obs, one_hot(batch.actions, self.n_actions), batch.next_obs)}

    def state_dict(self):
        arrays, meta = super().state_dict()
        arrays["encoder"] = self.encoder.values
        for k, (m, o) in enumerate(zip(self.ensemble, self.opts)):
            arrays[f"member{k}"] = m.values
            _put_opt(arrays, meta, f"opt{k}", o)
        meta["rng"] = self.rng.bit_generator.state
        return arrays, meta

    def load_state_dict(self, arrays, meta) -> None:
        super().load_state_dict(arrays, meta)
        self.encoder = self.encoder.like(np.array(arrays["encoder"]))
        for k in range(len(self.ensemble)):
            self.ensemble[k] = self.ensemble[k].like(np.array(arrays[f"member{k}"]))
            self.opts[k] = _get_opt(arrays, meta, f"opt{k}")
        self.rng.bit_generator.state = meta["rng"]


def params_checksum(p: ParamVector) -> str:
    return hashlib.sha256(p.values.tobytes()).hexdigest()


__all__ = ["Rnd", "Icm", "Disagreement", "one_hot", "ensemble_variance", "params_checksum"]
