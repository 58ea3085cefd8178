"""PPO over the augmented MDP.

Rollouts are whole episodes.  Each decision record carries the number of base
steps it consumed so GAE can discount across decisions by
``gamma ** steps_consumed``.  The fixed-frequency baseline is this same
trainer with ``max_repeat=1, switch_cost=0``; ``augmented=False`` swaps the
collection loop for plain ``env.step`` calls and exists to check that the two
paths agree.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .envcore import AugmentConfig, AugmentedAction, AugmentedState, BaseEnv, augment_step, observe
from .policy import (
    PolicyParams,
    PolicySpec,
    backward,
    forward,
    init_params,
    log_prob_and_entropy,
    sample,
)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class PPOConfig:
    gae_lambda: float = 0.95
    clip: float = 0.2
    learning_rate: float = 3e-4
    epochs: int = 4
    minibatch_size: int = 2048
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    num_envs: int = 32
    total_env_steps: int = 1_000_000
    max_grad_norm: float = 0.5
    reward_scale: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -0.5
    # mirror-symmetric policy when the environment declares a symmetry
    symmetric: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        for name in ("epochs", "minibatch_size", "num_envs", "total_env_steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.learning_rate < 0 or self.max_grad_norm <= 0 or self.reward_scale <= 0:
            raise ValueError("learning_rate must be >= 0; max_grad_norm and reward_scale > 0")


@dataclass
class RolloutBatch:
    obs: np.ndarray
    raw_action: np.ndarray
    duration: np.ndarray
    steps: np.ndarray
    log_prob: np.ndarray
    reward: np.ndarray
    value: np.ndarray
    done: np.ndarray
    # one entry per finished episode
    penalized_returns: list[float] = field(default_factory=list)
    unpenalized_returns: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.reward)

    def take(self, idx) -> "RolloutBatch":
        return RolloutBatch(
            self.obs[idx], self.raw_action[idx], self.duration[idx], self.steps[idx],
            self.log_prob[idx], self.reward[idx], self.value[idx], self.done[idx],
        )


def collect(envs: list[BaseEnv], params: PolicyParams, cfg: AugmentConfig, rng: np.random.Generator,
            episode_seeds, augmented: bool = True) -> RolloutBatch:
    """Run one episode per environment, decisions batched across environments.

    Records are returned environment-major so every episode is contiguous
    and in time order.
    """
    n_env = len(envs)
    states = [AugmentedState(env.reset(seed), 0) for env, seed in zip(envs, episode_seeds)]
    records: list[list[tuple]] = [[] for _ in range(n_env)]
    base_sum = [0.0] * n_env
    n_dec = [0] * n_env
    active = list(range(n_env))
    while active:
        obs = np.stack([observe(states[k], envs[k].horizon, envs[k].featurize) for k in active])
        out = forward(params, obs)
        action, raw, duration, logp = sample(out, rng)
        still = []
        for j, k in enumerate(active):
            env, s = envs[k], states[k]
            if augmented:
                tr = augment_step(env, s, AugmentedAction(action[j], int(duration[j])), cfg)
                nxt, reward, rewards, steps, done = tr.next_state, tr.aggregated_reward, tr.base_rewards, tr.steps_consumed, tr.done
            else:
                x, r, done = env.step(s.env_state, action[j], s.time_index)
                nxt = AugmentedState(x, s.time_index + 1)
                done = done or nxt.time_index >= env.horizon
                reward, rewards, steps = r, [r], 1
            for r in rewards:
                base_sum[k] += r
            n_dec[k] += 1
            records[k].append((obs[j], raw[j], duration[j], steps, logp[j], reward, out.value[j], done))
            states[k] = nxt
            if not done:
                still.append(k)
        active = still

    flat = [rec for env_records in records for rec in env_records]
    cols = list(zip(*flat))
    return RolloutBatch(
        obs=np.array(cols[0]),
        raw_action=np.array(cols[1]),
        duration=np.array(cols[2], dtype=int),
        steps=np.array(cols[3], dtype=int),
        log_prob=np.array(cols[4]),
        reward=np.array(cols[5]),
        value=np.array(cols[6]),
        done=np.array(cols[7], dtype=bool),
        penalized_returns=[base_sum[k] - cfg.switch_cost * n_dec[k] for k in range(n_env)],
        unpenalized_returns=list(base_sum),
    )


def compute_gae(rewards, values, dones, steps, gamma: float, lam: float):
    """Duration-aware GAE; returns ``(advantages, returns)``.

    ``delta_k = R_k + gamma**n_k * V_{k+1} * (1 - done_k) - V_k`` and
    ``A_k = delta_k + gamma**n_k * lam * (1 - done_k) * A_{k+1}``.
    """
    n = len(rewards)
    adv = np.zeros(n)
    next_value = 0.0
    next_adv = 0.0
    for k in reversed(range(n)):
        if dones[k]:
            next_value = 0.0
            next_adv = 0.0
        disc = gamma ** int(steps[k])
        delta = rewards[k] + disc * next_value - values[k]
        next_adv = delta + disc * lam * next_adv
        adv[k] = next_adv
        next_value = values[k]
    return adv, adv + np.asarray(values)


def normalize(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def ppo_loss(params: PolicyParams, batch: RolloutBatch, advantages, returns, cfg: PPOConfig, with_grad: bool = True):
    """Clipped surrogate + value regression - entropy bonus.

    Returns ``(loss, grads, stats)``; ``grads`` is None unless ``with_grad``.
    """
    logp, entropy, out, cache = log_prob_and_entropy(params, batch.obs, batch.raw_action, batch.duration, return_cache=True)
    n = len(logp)
    ratio = np.exp(logp - batch.log_prob)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    unclipped_term = ratio * advantages
    clipped_term = clipped * advantages
    use_unclipped = unclipped_term <= clipped_term
    surrogate = np.where(use_unclipped, unclipped_term, clipped_term)
    policy_loss = -surrogate.mean()
    value_err = out.value - returns
    value_loss = np.mean(value_err * value_err)
    entropy_mean = entropy.mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy_mean
    stats = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy_mean),
        "approx_kl": float(np.mean(batch.log_prob - logp)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    if not with_grad:
        return float(loss), None, stats
    # the clipped branch is flat in the ratio, so only unclipped samples carry gradient
    d_logp = np.where(use_unclipped, -advantages * ratio / n, 0.0)
    d_entropy = np.full(n, -cfg.entropy_coef / n)
    d_value = 2.0 * cfg.value_coef * value_err / n
    grads = backward(params, out, cache, batch.raw_action, batch.duration, d_logp, d_entropy, d_value)
    return float(loss), grads, stats


class Adam:
    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        flat -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _critic_mask(spec: PolicySpec) -> np.ndarray:
    mask = []
    for name, shape in spec.layer_shapes():
        mask += [name.startswith("value")] * int(np.prod(shape))
    return np.array(mask)


def clip_grad(grad: np.ndarray, critic: np.ndarray, max_norm: float) -> np.ndarray:
    """Clip actor and critic gradient norms separately."""
    out = grad.copy()
    for part in (critic, ~critic):
        norm = math.sqrt(float(np.dot(grad[part], grad[part])))
        if norm > max_norm:
            out[part] *= max_norm / norm
    return out


LOG_FIELDS = (
    "iteration", "env_steps", "mean_penalized_return", "mean_unpenalized_return", "mean_dt",
    "policy_loss", "value_loss", "entropy", "approx_kl", "clip_frac",
)


def policy_spec_for(env: BaseEnv, cfg: AugmentConfig, ppo: PPOConfig) -> PolicySpec:
    obs_mirror = action_mirror = None
    if ppo.symmetric and env.obs_mirror is not None:
        # the time feature is unaffected by the reflection
        obs_mirror = tuple(env.obs_mirror) + (1.0,)
        action_mirror = tuple(env.action_mirror)
    return PolicySpec(env.state_dim + 1, env.action_dim, cfg.max_repeat, tuple(ppo.hidden), ppo.init_log_std,
                      obs_mirror, action_mirror)


def train(env_factory: Callable[[], BaseEnv], ppo: PPOConfig, cfg: AugmentConfig, augmented: bool = True,
          on_iteration: Callable[[dict], None] | None = None):
    """Collect, estimate advantages, update; until ``ppo.total_env_steps`` base steps are spent.

    Returns ``(params, log)`` where ``log`` has one dict per iteration keyed by
    ``LOG_FIELDS``.  Deterministic for a given ``ppo.seed``.
    """
    if not augmented and cfg.max_repeat != 1:
        raise ValueError("the un-augmented path only exists for max_repeat == 1")
    envs = [env_factory() for _ in range(ppo.num_envs)]
    spec = policy_spec_for(envs[0], cfg, ppo)
    params = init_params(spec, [ppo.seed, 0])
    sample_rng = np.random.default_rng([ppo.seed, 1])
    episode_rng = np.random.default_rng([ppo.seed, 2])
    shuffle_rng = np.random.default_rng([ppo.seed, 3])
    optimizer = Adam(params.flat.size)
    critic = _critic_mask(spec)

    log: list[dict] = []
    env_steps = 0
    iteration = 0
    while env_steps < ppo.total_env_steps:
        iteration += 1
        seeds = episode_rng.integers(0, 2**63 - 1, size=ppo.num_envs)
        batch = collect(envs, params, cfg, sample_rng, [int(s) for s in seeds], augmented)
        env_steps += int(batch.steps.sum())
        adv, returns = compute_gae(batch.reward * ppo.reward_scale, batch.value, batch.done, batch.steps,
                                   cfg.discount, ppo.gae_lambda)
        adv = normalize(adv)

        stats_acc: dict[str, list[float]] = {}
        n = len(batch)
        for _ in range(ppo.epochs):
            order = shuffle_rng.permutation(n)
            for start in range(0, n, ppo.minibatch_size):
                idx = order[start:start + ppo.minibatch_size]
                loss, grads, stats = ppo_loss(params, batch.take(idx), adv[idx], returns[idx], ppo)
                if not math.isfinite(loss) or not np.all(np.isfinite(grads.flat)):
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {iteration}",
                        {"iteration": iteration, "env_steps": env_steps, "loss": loss, **stats,
                         "param_norm": float(np.linalg.norm(params.flat))},
                    )
                optimizer.step(params.flat, clip_grad(grads.flat, critic, ppo.max_grad_norm), ppo.learning_rate)
                params.clamp_log_std()
                for key, v in stats.items():
                    stats_acc.setdefault(key, []).append(v)

        row = {
            "iteration": iteration,
            "env_steps": env_steps,
            "mean_penalized_return": float(np.mean(batch.penalized_returns)),
            "mean_unpenalized_return": float(np.mean(batch.unpenalized_returns)),
            "mean_dt": float(batch.duration.mean()),
            **{k: float(np.mean(v)) for k, v in stats_acc.items()},
        }
        log.append(row)
        if on_iteration is not None:
            on_iteration(row)
    return params, log


def config_dict(ppo: PPOConfig) -> dict:
    d = asdict(ppo)
    d["hidden"] = list(ppo.hidden)
    return d
