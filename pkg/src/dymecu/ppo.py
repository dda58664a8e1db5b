"""On-policy PPO with a pluggable curiosity bonus.

Per iteration the loop (``Trainer.iterate``) does, in this order:

1. collect ``rollout_steps`` transitions with the current policy,
2. score every transition with the curiosity module and mix
   ``zeta * r_int + beta * r_ext``,
3. train the curiosity learners, consolidating memory after every step,
4. run GAE on the mixed reward and take clipped-surrogate policy steps.

The buffer is consumed once and cleared.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from dymecu.baselines import Disagreement, Icm, Rnd
from dymecu.config import PpoConfig, RunConfig, derive_seeds, validate
from dymecu.curiosity import CuriosityModule, DyMeCu, NoCuriosity, TransitionBatch
from dymecu.envs import ChainMdp, GridWorld
from dymecu.nn_core import (
    ContractError,
    MlpSpec,
    OptState,
    ParamVector,
    clip_grad_norm,
    forward,
    init_params,
    make_opt_state,
    optimizer_step,
    vjp,
)

Hook = Callable[[str, dict], None]


class NumericalError(RuntimeError):
    """Non-finite values appeared during training; ``trainer`` holds the last state."""

    def __init__(self, message: str, trainer: Trainer | None = None) -> None:
        super().__init__(message)
        self.trainer = trainer


def total_reward(r_int, r_ext, cfg: PpoConfig):
    return cfg.zeta * r_int + cfg.beta * r_ext


# -- policy -------------------------------------------------------------------


@dataclass
class PolicyState:
    policy_spec: MlpSpec
    value_spec: MlpSpec
    policy: ParamVector
    value: ParamVector
    policy_opt: OptState
    value_opt: OptState

    def copy(self) -> PolicyState:
        return PolicyState(
            self.policy_spec,
            self.value_spec,
            self.policy.copy(),
            self.value.copy(),
            self.policy_opt.copy(),
            self.value_opt.copy(),
        )


def init_policy(obs_dim: int, n_actions: int, hidden, seed: int, optimizer: str = "adam") -> PolicyState:
    """Tanh MLPs for logits and value. The logit layer is scaled by 0.01 so the
    initial policy is close to uniform."""
    rng = np.random.default_rng(seed)
    pspec = MlpSpec(obs_dim, tuple(hidden), n_actions, "tanh")
    vspec = MlpSpec(obs_dim, tuple(hidden), 1, "tanh")
    policy = init_params(pspec, rng)
    last = pspec.n_layers - 1
    policy[f"W{last}"][...] *= 0.01
    policy[f"b{last}"][...] = 0.0
    value = init_params(vspec, rng)
    return PolicyState(pspec, vspec, policy, value, make_opt_state(policy, optimizer), make_opt_state(value, optimizer))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def action_probs(ps: PolicyState, obs: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(forward(ps.policy_spec, ps.policy, obs)))


def act(ps: PolicyState, obs: np.ndarray, rng: np.random.Generator) -> tuple[int, float, float]:
    """Sample an action; returns ``(action, log_prob, value)``."""
    logits = forward(ps.policy_spec, ps.policy, obs)
    if not np.all(np.isfinite(logits)):
        raise NumericalError(f"non-finite policy logits {logits}")
    logp = log_softmax(logits)
    cdf = np.cumsum(np.exp(logp))
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    a = min(a, len(cdf) - 1)
    value = float(forward(ps.value_spec, ps.value, obs)[0])
    return a, float(logp[a]), value


# -- rollout storage and advantages -------------------------------------------


class RolloutBuffer:
    """Fixed-capacity on-policy storage for one iteration."""

    def __init__(self, capacity: int, obs_dim: int) -> None:
        if capacity < 1:
            raise ContractError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.log_probs = np.zeros(capacity)
        self.values = np.zeros(capacity)
        self.r_ext = np.zeros(capacity)
        self.r_int = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.last_value = 0.0

    def add(self, obs, action, log_prob, value, r_ext, next_obs, done) -> None:
        if self.size >= self.capacity:
            raise ContractError("rollout buffer is full")
        i = self.size
        self.obs[i] = obs
        self.actions[i] = action
        self.log_probs[i] = log_prob
        self.values[i] = value
        self.r_ext[i] = r_ext
        self.next_obs[i] = next_obs
        self.dones[i] = done
        self.size += 1

    def clear(self) -> None:
        self.size = 0
        self.last_value = 0.0

    def transitions(self) -> TransitionBatch:
        n = self.size
        return TransitionBatch(self.obs[:n], self.actions[:n], self.next_obs[:n])


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    last_value: float,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation; ``dones[t]`` cuts bootstrapping after step t.

    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = rewards.shape[0]
    if n == 0:
        raise ContractError("cannot estimate advantages on an empty buffer")
    adv = np.zeros(n)
    running = 0.0
    next_value = float(last_value)
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# -- policy update ------------------------------------------------------------


def ppo_loss_and_grads(
    ps: PolicyState,
    obs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
) -> tuple[dict[str, float], ParamVector, ParamVector]:
    """Loss = -clipped surrogate + value_coef * 0.5 * MSE - entropy_coef * entropy
    (batch means), with analytic gradients for both networks."""
    m = obs.shape[0]
    logits = forward(ps.policy_spec, ps.policy, obs)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite policy logits during update")
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    idx = np.arange(m)
    logp = logp_all[idx, actions]
    ratio = np.exp(logp - old_log_probs)
    surr1 = ratio * advantages
    surr2 = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
    unclipped = surr1 <= surr2
    entropy = -(p * logp_all).sum(axis=1)

    d_logp = np.where(unclipped, -ratio * advantages, 0.0) / m
    onehot = np.zeros_like(p)
    onehot[idx, actions] = 1.0
    d_logits = d_logp[:, None] * (onehot - p)
    d_logits += (cfg.entropy_coef / m) * p * (logp_all + entropy[:, None])
    g_pi = vjp(ps.policy_spec, ps.policy, obs, d_logits)[0]

    v = forward(ps.value_spec, ps.value, obs)[:, 0]
    d_v = cfg.value_coef * (v - returns) / m
    g_v = vjp(ps.value_spec, ps.value, obs, d_v[:, None])[0]

    policy_loss = float(-np.minimum(surr1, surr2).mean())
    value_loss = float(0.5 * ((v - returns) ** 2).mean())
    ent = float(entropy.mean())
    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": ent,
        "loss": policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent,
        "approx_kl": float((old_log_probs - logp).mean()),
        "clip_frac": float((np.abs(ratio - 1.0) > cfg.clip_eps).mean()),
    }
    return stats, g_pi, g_v


def ppo_update(
    ps: PolicyState,
    obs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
    rng: np.random.Generator,
    normalize_advantages: bool = True,
) -> tuple[PolicyState, dict[str, float]]:
    """Epochs of shuffled minibatch steps on the clipped surrogate. Returns a new state."""
    n = obs.shape[0]
    if n == 0:
        raise ContractError("ppo_update needs at least one sample")
    adv = np.asarray(advantages, dtype=np.float64)
    if normalize_advantages and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    ps = ps.copy()
    max_norm = cfg.max_grad_norm if cfg.max_grad_norm > 0 else None
    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            mb = order[start : start + cfg.minibatch]
            stats, g_pi, g_v = ppo_loss_and_grads(
                ps, obs[mb], actions[mb], old_log_probs[mb], adv[mb], returns[mb], cfg
            )
            ps.policy, ps.policy_opt = optimizer_step(ps.policy, clip_grad_norm(g_pi, max_norm), ps.policy_opt, cfg.lr)
            ps.value, ps.value_opt = optimizer_step(ps.value, clip_grad_norm(g_v, max_norm), ps.value_opt, cfg.lr)
            for k, val in stats.items():
                totals[k] = totals.get(k, 0.0) + val
            count += 1
    if not (np.all(np.isfinite(ps.policy.values)) and np.all(np.isfinite(ps.value.values))):
        raise NumericalError("non-finite policy parameters after update")
    return ps, {k: v / count for k, v in totals.items()}


# -- training loop ------------------------------------------------------------


def make_env(cfg: RunConfig) -> GridWorld | ChainMdp:
    e = cfg.env
    if e.kind == "grid":
        goal = (e.goal_x % e.width, e.goal_y % e.height)
        return GridWorld(e.width, e.height, goal, e.max_steps, e.one_hot, e.reward_mode)
    return ChainMdp(e.chain_n, e.max_steps, e.slip)


def make_module(cfg: RunConfig, obs_dim: int, n_actions: int, seed: int) -> CuriosityModule:
    c = cfg.curiosity
    spec = MlpSpec(obs_dim, tuple(c.hidden), c.latent_dim, c.activation)
    if c.module == "none":
        return NoCuriosity(normalize=False)
    if c.module.startswith("dymecu"):
        variant = {"dymecu_one_learner": "one_learner", "dymecu_one_source": "one_source"}.get(c.module, "dual")
        extra = c.extra_hidden if c.module == "dymecu_predictor_heads" else ()
        return DyMeCu(
            spec,
            seed=seed,
            alpha=c.alpha,
            lr=c.lr,
            variant=variant,
            source=c.source,
            extra_hidden=extra,
            memory_init=c.memory_init,
            normalize=c.normalize,
        )
    if c.module == "rnd":
        return Rnd(spec, seed=seed, lr=c.lr, normalize=c.normalize)
    kwargs = dict(feature_dim=c.latent_dim, hidden=c.hidden, seed=seed, lr=c.lr, normalize=c.normalize, activation=c.activation)
    if c.module == "icm":
        return Icm(obs_dim, n_actions, forward_weight=c.icm_forward_weight, **kwargs)
    return Disagreement(obs_dim, n_actions, ensemble_size=c.ensemble_size, **kwargs)


def _mean(xs) -> float | None:
    return float(np.mean(xs)) if len(xs) else None


@dataclass
class Trainer:
    """Owns every piece of mutable state of one seeded run."""

    cfg: RunConfig
    seed: int
    hooks: list[Hook] = field(default_factory=list)

    def __post_init__(self) -> None:
        validate(self.cfg)
        seeds = derive_seeds(self.seed)
        self.env = make_env(self.cfg)
        self.obs = self.env.reset(seeds["env"])
        self.policy = init_policy(self.env.obs_dim, self.env.n_actions, self.cfg.ppo.hidden, seeds["policy"])
        self.module = make_module(self.cfg, self.env.obs_dim, self.env.n_actions, seeds["curiosity"])
        self.rollout_rng = np.random.default_rng(seeds["rollout"])
        self.minibatch_rng = np.random.default_rng(seeds["minibatch"])
        self.buffer = RolloutBuffer(self.cfg.ppo.rollout_steps, self.env.obs_dim)
        self.steps = 0
        self.iteration = 0
        self.visited: set[int] = {self.env.state_id()}
        self.episode_visits: set[int] = {self.env.state_id()}
        self.episode_return = 0.0
        self.records: list[dict[str, Any]] = []

    def _emit(self, event: str, **info) -> None:
        for hook in self.hooks:
            hook(event, info)

    def _collect(self, n_steps: int) -> dict[str, list]:
        env, buf, ps = self.env, self.buffer, self.policy
        buf.clear()
        finished = {"return": [], "coverage": [], "length": []}
        for _ in range(n_steps):
            a, logp, value = act(ps, self.obs, self.rollout_rng)
            next_obs, r_ext, done = env.step(a)
            sid = env.state_id()
            self.visited.add(sid)
            self.episode_visits.add(sid)
            self.episode_return += r_ext
            buf.add(self.obs, a, logp, value, r_ext, next_obs, done)
            self.steps += 1
            if done:
                finished["return"].append(self.episode_return)
                finished["coverage"].append(len(self.episode_visits) / env.n_states)
                finished["length"].append(env.step_count)
                self.obs = env.reset()
                self.episode_return = 0.0
                self.episode_visits = {env.state_id()}
            else:
                self.obs = next_obs
        buf.last_value = 0.0 if buf.dones[buf.size - 1] else float(forward(ps.value_spec, ps.value, self.obs)[0])
        return finished

    def _train_curiosity(self, batch: TransitionBatch) -> dict[str, float]:
        c = self.cfg.curiosity
        if isinstance(self.module, NoCuriosity):
            return {}
        totals: dict[str, float] = {}
        count = 0
        n = len(batch)
        for _ in range(c.epochs):
            order = self.minibatch_rng.permutation(n)
            for start in range(0, n, c.minibatch):
                losses = self.module.update(batch.subset(order[start : start + c.minibatch]))
                self._emit("learners", iteration=self.iteration)
                self.module.consolidate()
                self._emit("memory", iteration=self.iteration)
                for k, v in losses.items():
                    totals[k] = totals.get(k, 0.0) + v
                count += 1
        return {k: v / count for k, v in totals.items()} if count else {}

    def iterate(self, n_steps: int, zeta: float, beta: float, phase: str = "joint") -> dict[str, Any]:
        t0 = time.perf_counter()
        pcfg = self.cfg.ppo
        mix = PpoConfig(**{**pcfg.__dict__, "zeta": zeta, "beta": beta})
        finished = self._collect(n_steps)
        self._emit("rollout", iteration=self.iteration, steps=self.steps)
        buf = self.buffer
        batch = buf.transitions()

        raw = np.asarray(self.module.raw_rewards(batch), dtype=np.float64)
        if not np.all(np.isfinite(raw)):
            raise NumericalError("non-finite intrinsic rewards", self)
        norm = np.asarray(self.module.normalize_rewards(raw), dtype=np.float64)
        n = buf.size
        buf.r_int[:n] = norm
        rewards = total_reward(norm, buf.r_ext[:n], mix)
        self._emit("rewards", iteration=self.iteration)

        cur_losses = self._train_curiosity(batch)

        adv, ret = compute_gae(rewards, buf.values[:n], buf.dones[:n], buf.last_value, pcfg.gamma, pcfg.lambda_gae)
        try:
            self.policy, pstats = ppo_update(
                self.policy, buf.obs[:n], buf.actions[:n], buf.log_probs[:n], adv, ret, pcfg, self.minibatch_rng
            )
        except NumericalError as exc:
            exc.trainer = self
            raise
        self._emit("policy", iteration=self.iteration)
        for k, v in cur_losses.items():
            if not np.isfinite(v):
                raise NumericalError(f"non-finite curiosity loss {k}", self)

        record: dict[str, Any] = {
            "iteration": self.iteration,
            "step": self.steps,
            "phase": phase,
            "episodes": len(finished["return"]),
            "return_mean": _mean(finished["return"]),
            "episode_coverage": _mean(finished["coverage"]),
            "episode_length": _mean(finished["length"]),
            "coverage": len(self.visited) / self.env.n_states,
            "extrinsic_sum": float(buf.r_ext[:n].sum()),
            "r_int_raw_mean": float(raw.mean()),
            "r_int_raw_std": float(raw.std()),
            "r_int_norm_mean": float(norm.mean()),
            "r_int_norm_std": float(norm.std()),
            **cur_losses,
            **pstats,
            "wall_clock": time.perf_counter() - t0,
        }
        buf.clear()
        self.iteration += 1
        self.records.append(record)
        return record

    def run(self, n_steps: int, zeta: float, beta: float, phase: str = "joint") -> list[dict[str, Any]]:
        target = self.steps + n_steps
        out = []
        while self.steps < target:
            out.append(self.iterate(min(self.cfg.ppo.rollout_steps, target - self.steps), zeta, beta, phase))
        return out


def train_loop(cfg: RunConfig, seed: int, hooks: list[Hook] | None = None) -> Trainer:
    """Run one seed to completion and return the trainer (``.records`` is the metrics log).

    ``pretrain_then_finetune`` trains on intrinsic reward only (beta = 0) for
    ``pretrain_steps``, then on extrinsic reward only (zeta = 0) for the rest,
    keeping policy and curiosity state.
    """
    trainer = Trainer(cfg, seed, list(hooks or []))
    p = cfg.ppo
    if cfg.run.mode == "joint":
        trainer.run(cfg.run.total_steps, p.zeta, p.beta, "joint")
    else:
        trainer.run(cfg.run.pretrain_steps, p.zeta, 0.0, "pretrain")
        trainer.run(cfg.run.total_steps - cfg.run.pretrain_steps, 0.0, p.beta, "finetune")
    return trainer
