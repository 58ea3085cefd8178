"""Tolerance-shaped state rewards and the RC-car task reward."""
from __future__ import annotations

import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class ToleranceSpec:
    bounds: tuple[float, float] = (0.0, 0.0)
    margin: float = 20.0
    value_at_margin: float = 0.1

    def __post_init__(self):
        lo, hi = self.bounds
        if lo > hi:
            raise ValueError(f"bounds must satisfy lo <= hi, got {self.bounds}")
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if not 0.0 < self.value_at_margin < 1.0:
            raise ValueError(f"value_at_margin must be in (0, 1), got {self.value_at_margin}")

    @property
    def gaussian_scale(self) -> float:
        # exp(-0.5 * scale**2) == value_at_margin
        return math.sqrt(-2.0 * math.log(self.value_at_margin))


def tolerance(distance: float, spec: ToleranceSpec) -> float:
    """1 inside ``spec.bounds``, gaussian decay outside, ``value_at_margin`` one margin past the bound."""
    if distance < 0:
        raise ValueError(f"distance must be non-negative, got {distance}")
    lo, hi = spec.bounds
    if lo <= distance <= hi:
        return 1.0
    gap = (lo - distance) if distance < lo else (distance - hi)
    z = gap / spec.margin * spec.gaussian_scale
    return math.exp(-0.5 * z * z)


def wrap_angle(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(angle, 2.0 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


# position x, y, heading, then body velocities and yaw rate
DEFAULT_STATE_WEIGHTS = (1.0, 1.0, 1.0, 0.2, 0.2, 0.2)


@dataclass(frozen=True)
class CarRewardConfig:
    action_penalty_weight: float = 0.005
    target_state: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    tolerance: ToleranceSpec = field(default_factory=ToleranceSpec)
    state_weights: tuple[float, ...] = DEFAULT_STATE_WEIGHTS

    def __post_init__(self):
        if self.action_penalty_weight < 0:
            raise ValueError("action_penalty_weight must be >= 0")
        if len(self.target_state) != 6 or len(self.state_weights) != 6:
            raise ValueError("target_state and state_weights need 6 entries")


def car_state_distance(x, cfg: CarRewardConfig) -> float:
    target = cfg.target_state
    w = cfg.state_weights
    diff = [x[k] - target[k] for k in range(6)]
    diff[2] = wrap_angle(x[2] - target[2])
    return math.sqrt(sum((w[k] * diff[k]) ** 2 for k in range(6)))


def car_reward(x, a, cfg: CarRewardConfig) -> float:
    """Tolerance reward on the weighted pose/velocity error minus ``w * ||a||``."""
    d = car_state_distance(x, cfg)
    return tolerance(d, cfg.tolerance) - cfg.action_penalty_weight * math.hypot(*a)
