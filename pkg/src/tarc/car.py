"""RC-car environment: dynamic bicycle model with Pacejka lateral tire forces.

State layout (6): ``p_x, p_y, theta, v_x, v_y, omega`` with body-frame
velocities.  Action (2): ``steering, throttle`` in [-1, 1].  Actuation delay
is modelled by a three-slot buffer of commanded actions; the oldest one is
what the motors see.  The environment state vector handed to env-core is the
physical state followed by the flattened buffer (12 values).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .envcore import BaseEnv
from .rewards import CarRewardConfig, car_reward, wrap_angle

GRAVITY = 9.81
DELAY_STEPS = 3
# lateral/yaw tire dynamics have ~3.5 ms time constants; 5 RK4 sub-steps keep a 30 Hz step stable
DEFAULT_SUBSTEPS = 5


@dataclass(frozen=True)
class CarParams:
    mass: float = 1.65
    inertia: float = 0.027
    l_f: float = 0.16
    l_r: float = 0.16
    # Pacejka coefficients; D is the peak friction coefficient, scaled by axle load
    B_f: float = 10.0
    C_f: float = 1.9
    D_f: float = 0.8
    B_r: float = 10.0
    C_r: float = 1.9
    D_r: float = 0.8
    C_m1: float = 8.0
    C_m2: float = 1.5
    C_d: float = 0.3
    C_roll: float = 0.5
    delta_max: float = 0.35
    v_lo: float = 0.3
    v_hi: float = 0.6

    def __post_init__(self):
        for name in ("mass", "inertia", "l_f", "l_r", "B_f", "C_f", "D_f", "B_r", "C_r", "D_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CarParams.{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.v_lo < self.v_hi:
            raise ValueError(f"need 0 <= v_lo < v_hi, got {self.v_lo}, {self.v_hi}")

    @classmethod
    def from_dict(cls, d: dict) -> "CarParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown car parameter(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class DomainRandomizationSpec:
    """Uniform multiplicative ranges around the nominal parameters."""

    mass: tuple[float, float] = (0.85, 1.15)
    center_of_mass: tuple[float, float] = (0.9, 1.1)
    tire_stiffness: tuple[float, float] = (0.8, 1.2)
    motor_power: tuple[float, float] = (0.85, 1.15)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if not (0 < lo <= 1.0 <= hi):
                raise ValueError(f"randomization range {f.name}={lo, hi} must be positive and contain 1.0")

    def sample(self, nominal: CarParams, rng: np.random.Generator) -> CarParams:
        mass_k, com_k, tire_k, motor_k = (rng.uniform(*getattr(self, f.name)) for f in fields(self))
        wheelbase = nominal.l_f + nominal.l_r
        l_f = nominal.l_f * com_k
        if not 0 < l_f < wheelbase:
            raise ValueError("center-of-mass range moves the CoM off the wheelbase")
        return replace(
            nominal,
            mass=nominal.mass * mass_k,
            l_f=l_f,
            l_r=wheelbase - l_f,
            B_f=nominal.B_f * tire_k,
            B_r=nominal.B_r * tire_k,
            C_m1=nominal.C_m1 * motor_k,
        )


NO_RANDOMIZATION = DomainRandomizationSpec((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0))


def lateral_tire_force(alpha: float, B: float, C: float, D: float) -> float:
    """Simplified magic formula ``D sin(C atan(B alpha))``."""
    return D * math.sin(C * math.atan(B * alpha))


def slip_angles(x, delta: float, p: CarParams) -> tuple[float, float]:
    v_x, v_y, omega = x[3], x[4], x[5]
    alpha_f = math.atan((v_y + p.l_f * omega) / v_x) - delta
    alpha_r = math.atan((v_y - p.l_r * omega) / v_x)
    return alpha_f, alpha_r


def _sign(v: float) -> float:
    return float(v > 0) - float(v < 0)


def drive_force(v_x: float, throttle: float, p: CarParams) -> float:
    return (p.C_m1 - p.C_m2 * v_x) * throttle - p.C_d * v_x * v_x * _sign(v_x) - p.C_roll * _sign(v_x)


def _kinematic(x, delta, f_x, p: CarParams):
    theta, v_x, v_y, omega = x[2], x[3], x[4], x[5]
    c, s = math.cos(theta), math.sin(theta)
    acc = f_x / p.mass
    wheelbase = p.l_f + p.l_r
    return (
        v_x * c - v_y * s,
        v_x * s + v_y * c,
        omega,
        acc,
        delta * acc * p.l_r / wheelbase,
        delta * acc / wheelbase,
    )


def _dynamic(x, delta, f_x, p: CarParams):
    theta, v_x, v_y, omega = x[2], x[3], x[4], x[5]
    c, s = math.cos(theta), math.sin(theta)
    wheelbase = p.l_f + p.l_r
    load_f = p.mass * GRAVITY * p.l_r / wheelbase
    load_r = p.mass * GRAVITY * p.l_f / wheelbase
    alpha_f, alpha_r = slip_angles(x, delta, p)
    # forces oppose slip
    f_fy = -load_f * lateral_tire_force(alpha_f, p.B_f, p.C_f, p.D_f)
    f_ry = -load_r * lateral_tire_force(alpha_r, p.B_r, p.C_r, p.D_r)
    cd, sd = math.cos(delta), math.sin(delta)
    return (
        v_x * c - v_y * s,
        v_x * s + v_y * c,
        omega,
        (f_x - f_fy * sd + p.mass * v_y * omega) / p.mass,
        (f_ry + f_fy * cd - p.mass * v_x * omega) / p.mass,
        (f_fy * p.l_f * cd - f_ry * p.l_r) / p.inertia,
    )


def dynamics_derivative(x, a, p: CarParams) -> tuple[float, ...]:
    """Time derivative of the 6-D car state under action ``a``.

    Below ``v_lo`` the kinematic bicycle model is used, above ``v_hi`` the
    tire-force model; in between the two derivatives are blended linearly.
    """
    if not all(math.isfinite(v) for v in x[:6]) or not all(math.isfinite(v) for v in a):
        raise ValueError("non-finite car state or action")
    steer = min(max(float(a[0]), -1.0), 1.0)
    throttle = min(max(float(a[1]), -1.0), 1.0)
    delta = steer * p.delta_max
    v_x = x[3]
    f_x = drive_force(v_x, throttle, p)
    blend = min(max((abs(v_x) - p.v_lo) / (p.v_hi - p.v_lo), 0.0), 1.0)
    if blend == 0.0:
        return _kinematic(x, delta, f_x, p)
    if blend == 1.0:
        return _dynamic(x, delta, f_x, p)
    kin = _kinematic(x, delta, f_x, p)
    dyn = _dynamic(x, delta, f_x, p)
    return tuple(blend * d + (1.0 - blend) * k for d, k in zip(dyn, kin))


def integrate(x, a, p: CarParams, dt: float, substeps: int = 1) -> tuple[float, ...]:
    """Classical RK4 with the action held constant over ``dt``."""
    x = tuple(float(v) for v in x[:6])
    h = dt / substeps
    for _ in range(substeps):
        k1 = dynamics_derivative(x, a, p)
        k2 = dynamics_derivative(tuple(xi + 0.5 * h * ki for xi, ki in zip(x, k1)), a, p)
        k3 = dynamics_derivative(tuple(xi + 0.5 * h * ki for xi, ki in zip(x, k2)), a, p)
        k4 = dynamics_derivative(tuple(xi + h * ki for xi, ki in zip(x, k3)), a, p)
        x = tuple(
            xi + h / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
            for xi, d1, d2, d3, d4 in zip(x, k1, k2, k3, k4)
        )
    return x


@dataclass(frozen=True)
class CarTask:
    start_pose: tuple[float, float, float] = (2.0, 0.0, math.pi)
    pose_noise: tuple[float, float, float] = (0.1, 0.1, 0.1)
    reward: CarRewardConfig = field(default_factory=CarRewardConfig)


def car_reset(seed, dr: DomainRandomizationSpec, nominal: CarParams | None = None, task: CarTask | None = None):
    """Sample the initial state, this episode's parameters and a zeroed delay buffer."""
    nominal = nominal or CarParams()
    task = task or CarTask()
    rng = np.random.default_rng(seed)
    params = dr.sample(nominal, rng)
    noise = rng.uniform(-1.0, 1.0, size=3) * np.asarray(task.pose_noise)
    px, py, theta = (s + float(n) for s, n in zip(task.start_pose, noise))
    state = (px, py, theta, 0.0, 0.0, 0.0)
    buffer = ((0.0, 0.0),) * DELAY_STEPS
    return state, params, buffer


def car_step(x, buffer, commanded, p: CarParams, task: CarRewardConfig, dt: float = 1.0 / 30.0,
             substeps: int = DEFAULT_SUBSTEPS):
    """Apply the oldest buffered action, shift ``commanded`` in, score the new state.

    Returns ``(x', buffer', reward, failed)``; ``failed`` is set when the
    integration leaves the finite range, in which case the state is held.
    """
    commanded = (min(max(float(commanded[0]), -1.0), 1.0), min(max(float(commanded[1]), -1.0), 1.0))
    applied = buffer[0]
    new_buffer = tuple(buffer[1:]) + (commanded,)
    try:
        x_next = integrate(x, applied, p, dt, substeps)
        failed = not all(math.isfinite(v) for v in x_next)
    except (ValueError, OverflowError):
        failed = True
    if failed:
        return tuple(x), new_buffer, 0.0, True
    return x_next, new_buffer, car_reward(x_next, commanded, task), False


class CarEnv(BaseEnv):
    env_id = "car"
    state_dim = 6 + 2 * DELAY_STEPS
    action_dim = 2
    # reflection through the x axis: p_y, theta, v_y, omega and steering flip
    obs_mirror = (1.0, -1.0, -1.0, 1.0, -1.0, -1.0) + (-1.0, 1.0) * DELAY_STEPS
    action_mirror = (-1.0, 1.0)

    def __init__(
        self,
        nominal: CarParams | None = None,
        randomization: DomainRandomizationSpec | None = None,
        task: CarTask | None = None,
        f_max: float = 30.0,
        horizon: int = 200,
        substeps: int = DEFAULT_SUBSTEPS,
    ):
        self.nominal = nominal or CarParams()
        self.randomization = randomization or DomainRandomizationSpec()
        self.task = task or CarTask()
        self.f_max = f_max
        self.horizon = horizon
        self.substeps = substeps
        self.params = self.nominal

    def reset(self, seed) -> np.ndarray:
        state, self.params, buffer = car_reset(seed, self.randomization, self.nominal, self.task)
        return pack_state(state, buffer)

    def step(self, state, action, t):
        x, buffer = unpack_state(state)
        x_next, buffer, r, failed = car_step(
            x, buffer, action, self.params, self.task.reward, 1.0 / self.f_max, self.substeps
        )
        return pack_state(x_next, buffer), r, failed or t + 1 >= self.horizon

    def featurize(self, state):
        out = np.array(state, dtype=float)
        out[2] = wrap_angle(out[2])
        return out

    def applied_action(self, state, action):
        return np.array(state[6:8], dtype=float)


def pack_state(x, buffer) -> np.ndarray:
    return np.array([*x, *(v for a in buffer for v in a)], dtype=float)


def unpack_state(state):
    s = state.tolist() if isinstance(state, np.ndarray) else list(state)
    x = tuple(s[:6])
    buffer = tuple((s[6 + 2 * k], s[7 + 2 * k]) for k in range(DELAY_STEPS))
    return x, buffer
