"""Torque-limited inverted pendulum with scheduled pushes.

``phi = 0`` is upright.  Integration is semi-implicit Euler at ``1 / f_max``.
A push adds an impulse to the angular velocity at the end of its step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envcore import AugmentConfig, BaseEnv, rollout
from .metrics import TracePoint, frequency_trace
from .rewards import ToleranceSpec, tolerance, wrap_angle


@dataclass(frozen=True)
class PendulumParams:
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    max_torque: float = 2.5
    damping: float = 0.1

    def __post_init__(self):
        for name in ("mass", "length", "gravity", "max_torque"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PendulumParams.{name} must be positive, got {getattr(self, name)}")
        if self.damping < 0:
            raise ValueError(f"PendulumParams.damping must be >= 0, got {self.damping}")


@dataclass(frozen=True)
class PendulumReward:
    tolerance: ToleranceSpec = field(default_factory=lambda: ToleranceSpec((0.0, 0.0), math.pi / 2, 0.1))
    action_penalty_weight: float = 0.005


@dataclass(frozen=True)
class PushSchedule:
    pushes: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        steps = [int(k) for k, _ in self.pushes]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"push steps must be strictly increasing, got {steps}")
        if steps and steps[0] < 0:
            raise ValueError("push steps must be non-negative")

    def impulse_at(self, step: int) -> float:
        for k, impulse in self.pushes:
            if k == step:
                return impulse
        return 0.0

    @property
    def steps(self) -> list[int]:
        return [k for k, _ in self.pushes]

    def check_horizon(self, horizon: int):
        if self.pushes and self.pushes[-1][0] >= horizon:
            raise ValueError(f"push at step {self.pushes[-1][0]} lies beyond horizon {horizon}")


@dataclass(frozen=True)
class RandomPushes:
    """Per-episode random push schedule used during training."""

    count: int = 0
    magnitude: tuple[float, float] = (0.2, 0.6)
    earliest_step: int = 50

    def sample(self, rng: np.random.Generator, horizon: int) -> PushSchedule:
        if self.count == 0:
            return PushSchedule()
        steps = sorted(rng.choice(np.arange(self.earliest_step, horizon), size=self.count, replace=False))
        mags = rng.uniform(*self.magnitude, size=self.count) * rng.choice([-1.0, 1.0], size=self.count)
        return PushSchedule(tuple((int(k), float(m)) for k, m in zip(steps, mags)))


def angular_acceleration(phi: float, phi_dot: float, torque: float, p: PendulumParams) -> float:
    inertia = p.mass * p.length**2
    return p.gravity / p.length * math.sin(phi) + (torque * p.max_torque - p.damping * phi_dot) / inertia


def pendulum_step(x, a, schedule: PushSchedule, t: int, p: PendulumParams, reward: PendulumReward, dt: float):
    phi, phi_dot = float(x[0]), float(x[1])
    torque = min(max(float(a[0]), -1.0), 1.0)
    phi_dot = phi_dot + dt * angular_acceleration(phi, phi_dot, torque, p)
    phi = phi + dt * phi_dot
    phi_dot = phi_dot + schedule.impulse_at(t)
    r = tolerance(abs(wrap_angle(phi)), reward.tolerance) - reward.action_penalty_weight * abs(float(a[0]))
    return (phi, phi_dot), r, False


def pendulum_energy(x, p: PendulumParams, dt: float) -> float:
    """Mechanical energy with zero potential at the bottom.

    The stored velocity of a semi-implicit Euler scheme sits half a step
    behind the angle, so it is advanced by ``dt / 2`` of the gravitational
    acceleration before evaluating the kinetic term.
    """
    phi, phi_dot = x
    v = phi_dot + 0.5 * dt * p.gravity / p.length * math.sin(phi)
    return 0.5 * p.mass * p.length**2 * v * v + p.mass * p.gravity * p.length * (1.0 + math.cos(phi))


class PendulumEnv(BaseEnv):
    env_id = "pendulum"
    state_dim = 2
    action_dim = 1
    obs_mirror = (-1.0, -1.0)
    action_mirror = (-1.0,)

    def __init__(
        self,
        params: PendulumParams | None = None,
        reward: PendulumReward | None = None,
        schedule: PushSchedule | None = None,
        random_pushes: RandomPushes | None = None,
        f_max: float = 50.0,
        horizon: int = 1000,
        init_angle: float = 0.1,
        init_velocity: float = 0.1,
    ):
        self.params = params or PendulumParams()
        self.reward = reward or PendulumReward()
        self.fixed_schedule = schedule
        self.random_pushes = random_pushes or RandomPushes()
        self.f_max = f_max
        self.horizon = horizon
        self.init_angle = init_angle
        self.init_velocity = init_velocity
        if schedule is not None:
            schedule.check_horizon(horizon)
        self.schedule = schedule or PushSchedule()

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        phi = rng.uniform(-self.init_angle, self.init_angle)
        phi_dot = rng.uniform(-self.init_velocity, self.init_velocity)
        if self.fixed_schedule is None:
            self.schedule = self.random_pushes.sample(rng, self.horizon)
        return np.array([phi, phi_dot])

    def step(self, state, action, t):
        x, r, done = pendulum_step(
            state, action, self.schedule, t, self.params, self.reward, 1.0 / self.f_max
        )
        return np.array(x), r, done or t + 1 >= self.horizon

    def featurize(self, state):
        return np.array([wrap_angle(state[0]), state[1]])


def perturbation_trace(policy, schedule: PushSchedule, seed, env: PendulumEnv | None = None,
                       cfg: AugmentConfig | None = None) -> list[TracePoint]:
    """Roll out ``policy`` under a fixed push schedule; one trace point per decision."""
    env = env or PendulumEnv()
    schedule.check_horizon(env.horizon)
    env.fixed_schedule = schedule
    env.schedule = schedule
    cfg = cfg or AugmentConfig(max_repeat=getattr(policy, "max_repeat", 1))
    return frequency_trace(rollout(env, policy, cfg, seed), schedule.steps)
