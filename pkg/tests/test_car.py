import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tarc.car import (
    DELAY_STEPS,
    NO_RANDOMIZATION,
    CarEnv,
    CarParams,
    DomainRandomizationSpec,
    car_reset,
    car_step,
    dynamics_derivative,
    integrate,
    lateral_tire_force,
    pack_state,
    slip_angles,
    unpack_state,
)
from tarc.envcore import AugmentedState, observe
from tarc.rewards import CarRewardConfig

P = CarParams()
TASK = CarRewardConfig()


def reference_derivative(x, a, p):
    """Second transcription of the blended bicycle model, vectorised with numpy."""
    px, py, th, vx, vy, om = x
    delta = np.clip(a[0], -1, 1) * p.delta_max
    thr = np.clip(a[1], -1, 1)
    fx = (p.C_m1 - p.C_m2 * vx) * thr - p.C_d * vx * abs(vx) - p.C_roll * np.sign(vx)
    L = p.l_f + p.l_r
    kin = np.array([vx * np.cos(th) - vy * np.sin(th), vx * np.sin(th) + vy * np.cos(th), om,
                    fx / p.mass, delta * fx / p.mass * p.l_r / L, delta * fx / p.mass / L])
    if abs(vx) <= p.v_lo:
        return kin
    af = np.arctan2(vy + p.l_f * om, vx) if vx > 0 else np.arctan((vy + p.l_f * om) / vx)
    af -= delta
    ar = np.arctan((vy - p.l_r * om) / vx)
    Ff = -p.mass * 9.81 * p.l_r / L * p.D_f * np.sin(p.C_f * np.arctan(p.B_f * af))
    Fr = -p.mass * 9.81 * p.l_f / L * p.D_r * np.sin(p.C_r * np.arctan(p.B_r * ar))
    dyn = np.array([kin[0], kin[1], om,
                    (fx - Ff * np.sin(delta)) / p.mass + vy * om,
                    (Fr + Ff * np.cos(delta)) / p.mass - vx * om,
                    (Ff * p.l_f * np.cos(delta) - Fr * p.l_r) / p.inertia])
    w = min((abs(vx) - p.v_lo) / (p.v_hi - p.v_lo), 1.0)
    return w * dyn + (1 - w) * kin


def mirror(x):
    return (x[0], -x[1], -x[2], x[3], -x[4], -x[5])


# ---------------------------------------------------------------- tire and slip

def test_pacejka_zero():
    assert lateral_tire_force(0.0, 10, 1.9, 1.0) == 0.0


def test_pacejka_closed_form_value():
    assert lateral_tire_force(0.1, 10, 1.9, 1.0) == pytest.approx(math.sin(1.9 * math.atan(1.0)), rel=1e-15)
    assert lateral_tire_force(0.1, 10, 1.9, 1.0) == pytest.approx(0.99692, abs=1e-5)


def test_pacejka_odd_and_bounded_random():
    rng = np.random.default_rng(0)
    for alpha in rng.uniform(-1.5, 1.5, size=10_000):
        f = lateral_tire_force(alpha, 10.0, 1.9, 0.8)
        assert abs(f) <= 0.8
        assert lateral_tire_force(-alpha, 10.0, 1.9, 0.8) == -f


def test_slip_straight():
    assert slip_angles((0, 0, 0, 2.0, 0.0, 0.0), 0.0, P) == (0.0, 0.0)


def test_slip_lateral_velocity():
    af, ar = slip_angles((0, 0, 0, 2.0, 0.2, 0.0), 0.0, P)
    assert af == ar == pytest.approx(math.atan(0.1), rel=1e-15)
    assert af == pytest.approx(0.09967, abs=1e-5)


def test_slip_sign_of_steering():
    af, _ = slip_angles((0, 0, 0, 2.0, 0.0, 0.0), 0.2, P)
    assert af == -0.2


# ---------------------------------------------------------------- dynamics

def test_rest_is_equilibrium():
    assert dynamics_derivative((0.0,) * 6, (0.0, 0.0), P) == (0.0,) * 6


def test_full_throttle_from_rest():
    d = dynamics_derivative((0.0,) * 6, (0.0, 1.0), P)
    assert d[3] == P.C_m1 / P.mass
    assert d[4] == d[5] == d[0] == d[1] == d[2] == 0.0


def test_derivative_matches_second_transcription():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        x = (*rng.uniform(-3, 3, size=3), rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(-3, 3))
        a = rng.uniform(-1.2, 1.2, size=2)
        ours = np.array(dynamics_derivative(x, a, P))
        ref = reference_derivative(np.array(x), a, P)
        assert np.allclose(ours, ref, rtol=1e-12, atol=1e-12), (x, a)


def test_non_finite_state_rejected():
    with pytest.raises(ValueError):
        dynamics_derivative((0, 0, 0, float("nan"), 0, 0), (0, 0), P)


# ---------------------------------------------------------------- integration

def test_zero_state_fixed_point():
    assert integrate((0.0,) * 6, (0.0, 0.0), P, 1 / 30) == (0.0,) * 6


def test_constant_velocity_straight_line():
    # zero drive force: throttle balances drag and rolling resistance at v_x = 1
    p = CarParams(C_d=0.0, C_roll=0.0, C_m2=0.0)
    x = integrate((0.0, 0.0, 0.0, 1.0, 0.0, 0.0), (0.0, 0.0), p, 1 / 30)
    assert x[0] == pytest.approx(1 / 30, rel=1e-12)
    assert x[1] == x[2] == 0.0


def _euler(x, a, p, dt, n=30):
    e = np.array(x, dtype=float)
    for _ in range(n):
        e = e + dt / n * np.array(dynamics_derivative(tuple(e), a, p))
    return e


@pytest.mark.parametrize("region", ["kinematic", "straight"])
def test_rk4_matches_fine_euler_in_smooth_regions(region):
    rng = np.random.default_rng(2)
    for _ in range(300):
        pose = tuple(rng.uniform(-2, 2, size=2)) + (rng.uniform(-3, 3),)
        if region == "kinematic":
            x, a = pose + (rng.uniform(0.1, 0.2), 0.0, 0.0), (rng.uniform(-1, 1), rng.uniform(-0.1, 0.1))
        else:
            x, a = pose + (rng.uniform(1, 3), 0.0, 0.0), (rng.uniform(-0.01, 0.01), rng.uniform(-1, 1))
        r = np.array(integrate(x, a, P, 1 / 30, substeps=5))
        e = _euler(x, a, P, 1 / 30)
        assert np.linalg.norm(r - e) / np.linalg.norm(r) < 1e-4


def test_default_substeps_close_to_converged():
    rng = np.random.default_rng(3)
    acts = rng.uniform(-1, 1, size=(150, 2))
    acts[:, 1] = np.abs(acts[:, 1])

    def run(sub):
        x, _, buf = car_reset(0, NO_RANDOMIZATION)
        for a in acts:
            x, buf, _, failed = car_step(x, buf, a, P, TASK, substeps=sub)
            assert not failed
        return np.array(x)

    assert np.max(np.abs(run(5) - run(40))) < 0.05


# ---------------------------------------------------------------- reset and randomization

def test_reset_deterministic():
    a = car_reset(7, DomainRandomizationSpec())
    b = car_reset(7, DomainRandomizationSpec())
    assert a == b


def test_degenerate_randomization_gives_nominal():
    _, params, buf = car_reset(3, NO_RANDOMIZATION)
    assert params == P
    assert buf == ((0.0, 0.0),) * DELAY_STEPS


def test_randomized_parameters_within_ranges():
    dr = DomainRandomizationSpec()
    wheelbase = P.l_f + P.l_r
    for seed in range(1000):
        _, p, _ = car_reset(seed, dr)
        assert P.mass * 0.85 <= p.mass <= P.mass * 1.15
        assert P.C_m1 * 0.85 <= p.C_m1 <= P.C_m1 * 1.15
        assert P.B_f * 0.8 <= p.B_f <= P.B_f * 1.2 and p.B_r == p.B_f
        assert P.l_f * 0.9 <= p.l_f <= P.l_f * 1.1
        assert p.l_f + p.l_r == pytest.approx(wheelbase, rel=1e-15)


@pytest.mark.parametrize("bad", [(0.9, 0.95), (1.05, 1.2), (0.0, 1.0)])
def test_randomization_range_must_contain_one(bad):
    with pytest.raises(ValueError):
        DomainRandomizationSpec(mass=bad)


@pytest.mark.parametrize("kwargs", [{"mass": 0.0}, {"inertia": -1.0}, {"v_lo": 0.7}])
def test_car_params_validation(kwargs):
    with pytest.raises(ValueError):
        CarParams(**kwargs)


def test_unknown_car_param_rejected():
    with pytest.raises(ValueError):
        CarParams.from_dict({"wheel_radius": 0.05})


# ---------------------------------------------------------------- step and delay

def test_first_three_steps_apply_zero():
    env = CarEnv(randomization=NO_RANDOMIZATION)
    s = env.reset(0)
    for t in range(DELAY_STEPS):
        assert env.applied_action(s, np.array([1.0, 1.0])).tolist() == [0.0, 0.0]
        s, _, _ = env.step(s, np.array([1.0, 1.0]), t)
    assert env.applied_action(s, np.array([1.0, 1.0])).tolist() == [1.0, 1.0]


def test_applied_is_commanded_shifted_by_three():
    rng = np.random.default_rng(4)
    commands = rng.uniform(-1, 1, size=(30, 2))
    x, p, buf = car_reset(0, NO_RANDOMIZATION)
    applied = []
    for c in commands:
        applied.append(buf[0])
        x, buf, _, _ = car_step(x, buf, c, p, TASK)
    expected = [(0.0, 0.0)] * 3 + [tuple(c) for c in commands[:-3]]
    assert applied == expected


def test_commands_clipped_into_buffer():
    x, p, buf = car_reset(0, NO_RANDOMIZATION)
    _, buf, _, _ = car_step(x, buf, (3.0, -2.0), p, TASK)
    assert buf[-1] == (1.0, -1.0)


def test_observation_dimensions():
    env = CarEnv()
    s = env.reset(0)
    assert s.shape == (12,) and env.state_dim == 12
    assert observe(AugmentedState(s, 0), env.horizon, env.featurize).shape == (13,)


def test_at_rest_stays_at_rest():
    x, p, buf = (0.5, -0.3, 1.0, 0.0, 0.0, 0.0), P, ((0.0, 0.0),) * 3
    for _ in range(10):
        x2, buf, _, _ = car_step(x, buf, (0.0, 0.0), p, TASK)
        assert x2 == x


def test_pack_roundtrip():
    x = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    buf = ((0.1, 0.2), (0.3, 0.4), (0.5, 0.6))
    assert unpack_state(pack_state(x, buf)) == (x, buf)


def test_mirror_symmetry():
    rng = np.random.default_rng(5)
    for trial in range(5):
        x, _, buf = car_reset(trial, NO_RANDOMIZATION)
        xm, bufm = mirror(x), buf
        for _ in range(120):
            a = (rng.uniform(-1, 1), rng.uniform(0, 1))
            x, buf, r, _ = car_step(x, buf, a, P, TASK)
            xm, bufm, rm, _ = car_step(xm, bufm, (-a[0], a[1]), P, TASK)
            assert np.max(np.abs(np.array(mirror(x)) - np.array(xm))) < 1e-9


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), steer=st.floats(-1, 1), throttle=st.floats(-1, 1))
def test_step_deterministic(seed, steer, throttle):
    env = CarEnv()
    a = env.reset(seed)
    b = env.reset(seed)
    for t in range(5):
        a, ra, _ = env.step(a, np.array([steer, throttle]), t)
        b, rb, _ = env.step(b, np.array([steer, throttle]), t)
    assert np.array_equal(a, b) and ra == rb


def test_horizon_ends_episode():
    env = CarEnv(horizon=5)
    s = env.reset(0)
    dones = []
    for t in range(5):
        s, _, d = env.step(s, np.zeros(2), t)
        dones.append(d)
    assert dones == [False] * 4 + [True]
