import numpy as np
import pytest

from tarc.envcore import BaseEnv


class ConstantEnv(BaseEnv):
    """Scalar toy env: reward is a fixed constant, state counts steps."""

    env_id = "constant"
    state_dim = 1
    action_dim = 1
    f_max = 30.0

    def __init__(self, reward=1.0, horizon=200, fail_at=None):
        self.reward = reward
        self.horizon = horizon
        self.fail_at = fail_at

    def reset(self, seed):
        return np.zeros(1)

    def step(self, state, action, t):
        done = self.fail_at is not None and t + 1 >= self.fail_at
        return state + 1.0, self.reward, done or t + 1 >= self.horizon


@pytest.fixture
def constant_env():
    return ConstantEnv()


def constant_policy(action, duration):
    def policy(obs):
        return np.atleast_1d(np.asarray(action, dtype=float)), duration
    return policy


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
