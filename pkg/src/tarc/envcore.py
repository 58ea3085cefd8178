"""Base-environment contract and the time-adaptive augmentation.

A fixed-frequency environment steps at ``f_max``.  The augmentation lets a
policy emit ``(action, duration)``: the action is held for ``duration`` base
steps, the per-step rewards are discounted inside the window and a fixed
switch cost is charged once per decision.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class BaseEnv(abc.ABC):
    """Discrete-time environment stepped at ``f_max`` for ``horizon`` steps.

    ``step`` must be a pure function of ``(state, action, t)`` once ``reset``
    has fixed the per-episode parameters.  ``t`` is the base step index; only
    time-scheduled effects (pendulum pushes) read it.
    """

    env_id: str = "base"
    state_dim: int
    action_dim: int
    f_max: float
    horizon: int
    # sign flips of featurize(state) and of the action under the task's mirror
    # symmetry, if it has one
    obs_mirror: tuple[float, ...] | None = None
    action_mirror: tuple[float, ...] | None = None

    @abc.abstractmethod
    def reset(self, seed) -> np.ndarray:
        ...

    @abc.abstractmethod
    def step(self, state: np.ndarray, action: np.ndarray, t: int) -> tuple[np.ndarray, float, bool]:
        ...

    def featurize(self, state: np.ndarray) -> np.ndarray:
        return state

    def applied_action(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Action that actually reaches the plant when ``action`` is commanded."""
        return np.clip(action, -1.0, 1.0)


@dataclass(frozen=True)
class AugmentConfig:
    max_repeat: int = 1
    switch_cost: float = 0.0
    discount: float = 0.99

    def __post_init__(self):
        if int(self.max_repeat) != self.max_repeat or self.max_repeat < 1:
            raise ValueError(f"max_repeat must be an integer >= 1, got {self.max_repeat!r}")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.discount!r}")
        if self.switch_cost < 0.0:
            raise ValueError(f"switch_cost must be >= 0, got {self.switch_cost!r}")

    @property
    def is_baseline(self) -> bool:
        return self.max_repeat == 1


@dataclass(frozen=True)
class AugmentedState:
    env_state: np.ndarray
    time_index: int


@dataclass(frozen=True)
class AugmentedAction:
    action: np.ndarray
    duration: int


@dataclass(frozen=True)
class AugmentedTransition:
    next_state: AugmentedState
    aggregated_reward: float
    base_rewards: list[float]
    steps_consumed: int
    done: bool
    # per base step, what reached the plant (post delay buffer for the car)
    applied_actions: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class Decision:
    state: AugmentedState
    action: AugmentedAction
    transition: AugmentedTransition


@dataclass
class Trajectory:
    decisions: list[Decision]
    f_max: float
    horizon: int

    def __len__(self):
        return len(self.decisions)

    @property
    def n_base_steps(self) -> int:
        return sum(d.transition.steps_consumed for d in self.decisions)

    def base_rewards(self) -> list[float]:
        return [r for d in self.decisions for r in d.transition.base_rewards]

    def applied_actions(self) -> np.ndarray:
        return np.array([a for d in self.decisions for a in d.transition.applied_actions])


def discounted_window_sum(rewards: Sequence[float], discount: float) -> float:
    """Left-to-right sum of ``discount**k * rewards[k]``."""
    total = 0.0
    for k, r in enumerate(rewards):
        total += discount**k * r
    return total


def augment_step(env: BaseEnv, s: AugmentedState, u: AugmentedAction, cfg: AugmentConfig) -> AugmentedTransition:
    """Hold ``u.action`` for ``u.duration`` base steps and charge the switch cost once.

    Stops early when the environment reports ``done`` or the horizon is
    reached; the switch cost is still charged in full.
    """
    duration = u.duration
    if int(duration) != duration or not 1 <= duration <= cfg.max_repeat:
        raise ValueError(f"duration must be in 1..{cfg.max_repeat}, got {duration!r}")
    if not 0 <= s.time_index < env.horizon:
        raise ValueError(f"cannot step from terminal time index {s.time_index} (horizon {env.horizon})")

    x = s.env_state
    t = s.time_index
    rewards: list[float] = []
    applied: list[np.ndarray] = []
    done = False
    for _ in range(int(duration)):
        applied.append(env.applied_action(x, u.action))
        x, r, done = env.step(x, u.action, t)
        rewards.append(r)
        t += 1
        if done or t >= env.horizon:
            done = True
            break

    aggregated = discounted_window_sum(rewards, cfg.discount) - cfg.switch_cost
    return AugmentedTransition(
        next_state=AugmentedState(x, t),
        aggregated_reward=aggregated,
        base_rewards=rewards,
        steps_consumed=len(rewards),
        done=done,
        applied_actions=applied,
    )


def frequency_of(duration: int, f_max: float) -> float:
    if duration < 1:
        raise ValueError(f"duration must be >= 1, got {duration!r}")
    if f_max <= 0:
        raise ValueError(f"f_max must be positive, got {f_max!r}")
    return f_max / duration


def observe(s: AugmentedState, horizon: int, featurize: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Policy input: environment features followed by ``t / horizon``."""
    x = s.env_state if featurize is None else featurize(s.env_state)
    return np.append(np.asarray(x, dtype=float), s.time_index / horizon)


Policy = Callable[[np.ndarray], tuple[np.ndarray, int]]


def rollout(env: BaseEnv, policy: Policy, cfg: AugmentConfig, seed) -> Trajectory:
    """Run one episode of the augmented MDP with ``policy(obs) -> (action, duration)``."""
    s = AugmentedState(env.reset(seed), 0)
    decisions: list[Decision] = []
    while True:
        action, duration = policy(observe(s, env.horizon, env.featurize))
        u = AugmentedAction(np.asarray(action, dtype=float), int(duration))
        tr = augment_step(env, s, u, cfg)
        decisions.append(Decision(s, u, tr))
        s = tr.next_state
        if tr.done:
            break
    return Trajectory(decisions, env.f_max, env.horizon)
