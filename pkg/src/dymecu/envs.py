"""Small deterministic sparse-reward environments with vector observations."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from dymecu.nn_core import ContractError

# grid actions
UP, DOWN, LEFT, RIGHT = range(4)
_MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}
# chain actions
CHAIN_LEFT, CHAIN_RIGHT = range(2)


class GridWorld:
    """``width x height`` grid, agent starts at (0, 0).

    Observation is ``(x / width, y / height)``, followed by a one-hot of the cell
    when ``one_hot`` is set. In ``"sparse"`` mode the only reward is +1 on the
    step that reaches the goal; ``"dense"`` additionally charges
    ``1 / (width + height)`` per non-goal step.
    """

    n_actions = 4

    def __init__(
        self,
        width: int = 20,
        height: int = 20,
        goal: tuple[int, int] | None = None,
        max_steps: int = 200,
        one_hot: bool = False,
        reward_mode: str = "sparse",
    ) -> None:
        if width < 1 or height < 1 or max_steps < 1:
            raise ContractError("width, height and max_steps must be positive")
        self.width = width
        self.height = height
        self.goal = (width - 1, height - 1) if goal is None else tuple(goal)
        if not (0 <= self.goal[0] < width and 0 <= self.goal[1] < height):
            raise ContractError(f"goal {self.goal} lies outside the grid")
        if reward_mode not in ("sparse", "dense"):
            raise ContractError(f"unknown reward_mode {reward_mode!r}")
        self.max_steps = max_steps
        self.one_hot = one_hot
        self.reward_mode = reward_mode
        self.agent = (0, 0)
        self.step_count = 0
        self.done = True
        self.seed: int | None = None

    @property
    def n_states(self) -> int:
        return self.width * self.height

    @property
    def obs_dim(self) -> int:
        return 2 + (self.n_states if self.one_hot else 0)

    def state_id(self) -> int:
        x, y = self.agent
        return y * self.width + x

    def observation(self) -> np.ndarray:
        x, y = self.agent
        obs = np.zeros(self.obs_dim)
        obs[0] = x / self.width
        obs[1] = y / self.height
        if self.one_hot:
            obs[2 + self.state_id()] = 1.0
        return obs

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.seed = seed
        self.agent = (0, 0)
        self.step_count = 0
        self.done = False
        return self.observation()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise ContractError("step() called on a finished episode; call reset()")
        if not isinstance(action, (int, np.integer)) or action not in _MOVES:
            raise ContractError(f"invalid grid action {action!r}")
        dx, dy = _MOVES[int(action)]
        x = min(max(self.agent[0] + dx, 0), self.width - 1)
        y = min(max(self.agent[1] + dy, 0), self.height - 1)
        self.agent = (x, y)
        self.step_count += 1
        at_goal = self.agent == self.goal
        if at_goal:
            reward = 1.0
        elif self.reward_mode == "dense":
            reward = -1.0 / (self.width + self.height)
        else:
            reward = 0.0
        self.done = at_goal or self.step_count >= self.max_steps
        return self.observation(), reward, self.done


class ChainMdp:
    """``n`` states on a line; start at 0, +1 for reaching ``n - 1``.

    With probability ``slip`` the chosen direction is reversed.
    """

    n_actions = 2

    def __init__(self, n: int = 10, max_steps: int = 100, slip: float = 0.0) -> None:
        if n < 2 or max_steps < 1:
            raise ContractError("chain needs n >= 2 and max_steps >= 1")
        if not 0.0 <= slip <= 1.0:
            raise ContractError("slip must lie in [0, 1]")
        self.n = n
        self.max_steps = max_steps
        self.slip = slip
        self.position = 0
        self.step_count = 0
        self.done = True
        self.seed: int | None = None
        self._rng = np.random.default_rng(0)

    @property
    def n_states(self) -> int:
        return self.n

    @property
    def obs_dim(self) -> int:
        return self.n

    def state_id(self) -> int:
        return self.position

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.n)
        obs[self.position] = 1.0
        return obs

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.seed = seed
            self._rng = np.random.default_rng(seed)
        self.position = 0
        self.step_count = 0
        self.done = False
        return self.observation()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise ContractError("step() called on a finished episode; call reset()")
        if not isinstance(action, (int, np.integer)) or action not in (CHAIN_LEFT, CHAIN_RIGHT):
            raise ContractError(f"invalid chain action {action!r}")
        direction = 1 if action == CHAIN_RIGHT else -1
        if self.slip > 0.0 and self._rng.random() < self.slip:
            direction = -direction
        self.position = min(max(self.position + direction, 0), self.n - 1)
        self.step_count += 1
        at_end = self.position == self.n - 1
        self.done = at_end or self.step_count >= self.max_steps
        return self.observation(), 1.0 if at_end else 0.0, self.done


def coverage(visits: Iterable[int], env: GridWorld | ChainMdp) -> float:
    """Fraction of the state space in ``visits`` (state ids); the start state always counts."""
    seen = set(visits)
    seen.add(0)
    if any(not 0 <= v < env.n_states for v in seen):
        raise ContractError("visit ids outside the state space")
    return len(seen) / env.n_states


def make_env(kind: str, **kwargs) -> GridWorld | ChainMdp:
    if kind == "grid":
        return GridWorld(**kwargs)
    if kind == "chain":
        return ChainMdp(**kwargs)
    raise ContractError(f"unknown env kind {kind!r}")
