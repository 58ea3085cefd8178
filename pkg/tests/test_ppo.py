import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tarc.envcore import AugmentConfig
from tarc.pendulum import PendulumEnv, RandomPushes
from tarc.policy import PolicyParams, PolicySpec, forward, init_params, log_prob_and_entropy, sample
from tarc.ppo import (
    Adam,
    PPOConfig,
    RolloutBatch,
    _critic_mask,
    clip_grad,
    collect,
    compute_gae,
    normalize,
    ppo_loss,
    train,
)

from test_policy import fd_check, random_params

SPEC = PolicySpec(obs_dim=3, action_dim=1, max_repeat=3, hidden=(16, 16))
TINY = PPOConfig(num_envs=2, total_env_steps=3000, minibatch_size=256, epochs=2, hidden=(16, 16))


def gae_oracle(rewards, values, dones, steps, gamma, lam):
    """Direct recursion A_k = delta_k + gamma^n_k lam (1 - d_k) A_{k+1}, evaluated by plain recursion."""
    n = len(rewards)

    def next_value(k):
        return 0.0 if dones[k] or k + 1 >= n else values[k + 1]

    def adv(k):
        if k >= n:
            return 0.0
        disc = gamma ** steps[k]
        delta = rewards[k] + disc * next_value(k) - values[k]
        tail = 0.0 if dones[k] else adv(k + 1)
        return delta + disc * lam * tail

    return np.array([adv(k) for k in range(n)])


def make_batch(params, n=32, seed=0, perturb=0.0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(n, params.spec.obs_dim))
    out = forward(params, obs)
    _, raw, dur, logp = sample(out, rng)
    batch = RolloutBatch(obs, raw, dur, dur.copy(), logp + perturb * rng.normal(size=n),
                         rng.normal(size=n), out.value, np.zeros(n, dtype=bool))
    adv = rng.normal(size=n)
    returns = rng.normal(size=n)
    return batch, adv, returns


# ---------------------------------------------------------------- GAE

def test_gae_monte_carlo_limit():
    r = np.array([1.0, 2.0, 3.0, 4.0])
    adv, ret = compute_gae(r, np.zeros(4), [False, False, False, True], [1, 2, 1, 3], 1.0, 1.0)
    assert adv.tolist() == [10.0, 9.0, 7.0, 4.0]
    assert ret.tolist() == adv.tolist()


def test_gae_single_terminal():
    adv, ret = compute_gae([2.5], [0.7], [True], [3], 0.9, 0.95)
    assert adv[0] == pytest.approx(2.5 - 0.7, abs=1e-15)
    assert ret[0] == pytest.approx(2.5, abs=1e-15)


def test_gae_episode_boundary_blocks_bootstrap():
    adv, _ = compute_gae([1.0, 1.0], [0.0, 100.0], [True, True], [1, 1], 0.99, 0.95)
    assert adv[0] == 1.0


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 25), seed=st.integers(0, 10**6), gamma=st.floats(0.5, 1.0), lam=st.floats(0.0, 1.0))
def test_gae_matches_recursive_oracle(n, seed, gamma, lam):
    rng = np.random.default_rng(seed)
    rewards = rng.normal(size=n)
    values = rng.normal(size=n)
    dones = rng.random(n) < 0.2
    dones[-1] = True
    steps = rng.integers(1, 5, size=n)
    adv, ret = compute_gae(rewards, values, dones, steps, gamma, lam)
    assert np.allclose(adv, gae_oracle(rewards, values, dones, steps, gamma, lam), rtol=1e-12, atol=1e-12)
    assert np.allclose(ret, adv + values)


# ---------------------------------------------------------------- loss

def transcribed_loss(params, batch, adv, returns, cfg):
    """Literal per-sample transcription of the clipped objective."""
    total_pi, total_v, total_h = 0.0, 0.0, 0.0
    n = len(batch)
    for k in range(n):
        logp, ent, out, _ = log_prob_and_entropy(params, batch.obs[k:k + 1], batch.raw_action[k:k + 1],
                                                 batch.duration[k:k + 1], return_cache=True)
        rho = math.exp(logp[0] - batch.log_prob[k])
        total_pi += min(rho * adv[k], max(min(rho, 1 + cfg.clip), 1 - cfg.clip) * adv[k])
        total_v += (out.value[0] - returns[k]) ** 2
        total_h += ent[0]
    return -total_pi / n + cfg.value_coef * total_v / n - cfg.entropy_coef * total_h / n


def test_loss_matches_transcription():
    p = random_params(SPEC, seed=2)
    batch, adv, ret = make_batch(p, perturb=0.3)
    cfg = PPOConfig()
    loss, _, _ = ppo_loss(p, batch, adv, ret, cfg, with_grad=False)
    assert loss == pytest.approx(transcribed_loss(p, batch, adv, ret, cfg), rel=1e-12)


def test_surrogate_zero_at_old_params_with_normalized_advantages():
    p = random_params(SPEC, seed=3)
    batch, adv, ret = make_batch(p)
    _, _, stats = ppo_loss(p, batch, normalize(adv), ret, PPOConfig())
    assert stats["policy_loss"] == pytest.approx(0.0, abs=1e-12)
    assert stats["clip_frac"] == 0.0 and stats["approx_kl"] == 0.0


def test_clipped_positive_advantage_has_no_policy_gradient():
    p = random_params(SPEC, seed=4)
    batch, _, ret = make_batch(p, n=8)
    batch.log_prob = batch.log_prob - 5.0  # ratio ~ e^5, far above 1 + eps
    adv = np.ones(8)
    cfg = PPOConfig(entropy_coef=0.0, value_coef=0.0)
    _, g, stats = ppo_loss(p, batch, adv, ret, cfg)
    assert stats["clip_frac"] == 1.0
    assert np.all(g.flat == 0.0)


def test_full_loss_gradient_matches_finite_differences():
    p = random_params(SPEC, seed=5)
    batch, adv, ret = make_batch(p, n=24, perturb=0.1)
    cfg = PPOConfig()
    _, g, _ = ppo_loss(p, batch, adv, ret, cfg)
    f = lambda q: ppo_loss(q, batch, adv, ret, cfg, with_grad=False)[0]
    assert fd_check(p, f, g.flat, n_coords=100) < 1e-4


def test_normalization_invariant_to_affine_reward_shift():
    rng = np.random.default_rng(0)
    adv = rng.normal(size=50)
    assert np.allclose(normalize(adv), normalize(3.0 * adv + 7.0), atol=1e-9)


# ---------------------------------------------------------------- optimiser pieces

def test_adam_first_step_is_lr_times_sign():
    flat = np.array([1.0, -2.0, 0.5])
    Adam(3).step(flat, np.array([0.3, -4.0, 0.0]), 0.1)
    assert np.allclose(flat, [0.9, -1.9, 0.5], atol=1e-6)


def test_clip_grad_separates_actor_and_critic():
    mask = _critic_mask(SPEC)
    g = np.where(mask, 3.0, 0.001)
    out = clip_grad(g, mask, 0.5)
    assert np.linalg.norm(out[mask]) == pytest.approx(0.5)
    assert np.array_equal(out[~mask], g[~mask])


# ---------------------------------------------------------------- training loop

def test_collect_whole_episodes_env_major():
    env_factory = lambda: PendulumEnv(horizon=40)
    envs = [env_factory() for _ in range(3)]
    p = init_params(SPEC, 0)
    batch = collect(envs, p, AugmentConfig(3, 0.1), np.random.default_rng(0), [1, 2, 3])
    ends = np.flatnonzero(batch.done)
    assert len(ends) == 3 and ends[-1] == len(batch) - 1
    starts = np.r_[0, ends[:-1] + 1]
    for s, e in zip(starts, ends):
        assert batch.steps[s:e + 1].sum() == 40
        assert batch.obs[s, -1] == 0.0


def test_zero_learning_rate_leaves_params():
    cfg = PPOConfig(**{**TINY.__dict__, "learning_rate": 0.0})
    p, log = train(lambda: PendulumEnv(horizon=100), cfg, AugmentConfig(3, 0.01))
    assert np.array_equal(p.flat, init_params(p.spec, [cfg.seed, 0]).flat)
    assert len(log) >= 2


def test_training_deterministic():
    a = train(lambda: PendulumEnv(horizon=100), TINY, AugmentConfig(2, 0.01))
    b = train(lambda: PendulumEnv(horizon=100), TINY, AugmentConfig(2, 0.01))
    assert np.array_equal(a[0].flat, b[0].flat) and a[1] == b[1]


def test_baseline_paths_identical():
    factory = lambda: PendulumEnv(horizon=100, random_pushes=RandomPushes(count=1))
    a = train(factory, TINY, AugmentConfig(1, 0.0), augmented=True)
    b = train(factory, TINY, AugmentConfig(1, 0.0), augmented=False)
    assert a[1] == b[1] and np.array_equal(a[0].flat, b[0].flat)


def test_budget_counted_in_base_steps():
    _, log = train(lambda: PendulumEnv(horizon=100), TINY, AugmentConfig(3, 0.0))
    assert all(row["env_steps"] == 200 * row["iteration"] for row in log)
    assert log[-1]["env_steps"] >= TINY.total_env_steps


def test_unaugmented_path_requires_baseline():
    with pytest.raises(ValueError):
        train(lambda: PendulumEnv(horizon=50), TINY, AugmentConfig(2), augmented=False)


@pytest.mark.parametrize("kwargs", [{"clip": 0.0}, {"gae_lambda": 1.5}, {"epochs": 0}, {"learning_rate": -1.0},
                                    {"reward_scale": 0.0}])
def test_ppo_config_validation(kwargs):
    with pytest.raises(ValueError):
        PPOConfig(**kwargs)


def test_symmetric_spec_from_environment():
    from tarc.car import CarEnv
    from tarc.ppo import policy_spec_for
    spec = policy_spec_for(CarEnv(), AugmentConfig(4), PPOConfig(symmetric=True))
    assert spec.obs_dim == 13 and spec.obs_mirror[-1] == 1.0 and spec.action_mirror == (-1.0, 1.0)
    assert policy_spec_for(CarEnv(), AugmentConfig(4), PPOConfig()).obs_mirror is None


def test_symmetric_loss_gradient_matches_finite_differences():
    from test_policy import SYM
    p = random_params(SYM, seed=12)
    batch, adv, ret = make_batch(p, n=24, perturb=0.1)
    cfg = PPOConfig()
    _, g, _ = ppo_loss(p, batch, adv, ret, cfg)
    f = lambda q: ppo_loss(q, batch, adv, ret, cfg, with_grad=False)[0]
    assert fd_check(p, f, g.flat, n_coords=100) < 1e-4
