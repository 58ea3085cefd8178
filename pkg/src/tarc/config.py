"""Run configuration: one YAML file fully determines a run."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .car import DEFAULT_SUBSTEPS, CarEnv, CarParams, CarTask, DomainRandomizationSpec
from .envcore import AugmentConfig, BaseEnv
from .pendulum import PendulumEnv, PendulumParams, PendulumReward, PushSchedule, RandomPushes
from .policy import config_hash
from .ppo import PPOConfig
from .rewards import CarRewardConfig, ToleranceSpec

ENVIRONMENTS = ("car", "pendulum")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class RewardSettings:
    margin: float
    value_at_margin: float = 0.1
    action_penalty_weight: float = 0.005


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 5
    # None: use augment.switch_cost
    switch_cost: float | None = None


@dataclass(frozen=True)
class PushSettings:
    random: RandomPushes = field(default_factory=RandomPushes)
    schedule: PushSchedule = field(default_factory=PushSchedule)


@dataclass(frozen=True)
class RunConfig:
    env: str
    seeds: tuple[int, ...]
    augment: AugmentConfig
    ppo: PPOConfig
    reward: RewardSettings
    output_dir: str = "runs"
    name: str | None = None
    env_params: dict = field(default_factory=dict)
    randomization: DomainRandomizationSpec = field(default_factory=DomainRandomizationSpec)
    pushes: PushSettings = field(default_factory=PushSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @property
    def label(self) -> str:
        return "baseline" if self.augment.max_repeat == 1 else f"TARC-{self.augment.max_repeat}"

    @property
    def run_name(self) -> str:
        return self.name or self.label

    def seed_dir(self, seed: int, root: str | Path | None = None) -> Path:
        return Path(root or self.output_dir) / self.run_name / f"seed_{seed}"

    def with_switch_cost(self, c: float) -> "RunConfig":
        return replace(self, augment=replace(self.augment, switch_cost=c))

    def make_env(self, schedule: PushSchedule | None = None) -> BaseEnv:
        if self.env == "car":
            tol = ToleranceSpec((0.0, 0.0), self.reward.margin, self.reward.value_at_margin)
            task = CarTask(reward=CarRewardConfig(self.reward.action_penalty_weight, tolerance=tol))
            params = dict(self.env_params)
            substeps = params.pop("substeps", DEFAULT_SUBSTEPS)
            return CarEnv(CarParams.from_dict(params), self.randomization, task, substeps=substeps)
        tol = ToleranceSpec((0.0, 0.0), self.reward.margin, self.reward.value_at_margin)
        reward = PendulumReward(tol, self.reward.action_penalty_weight)
        return PendulumEnv(
            PendulumParams(**self.env_params), reward,
            schedule=schedule, random_pushes=self.pushes.random,
        )

    def policy_hash(self) -> str:
        """Identifies which environments a checkpoint can drive."""
        env = self.make_env()
        return config_hash({
            "env": self.env,
            "obs_dim": env.state_dim + 1,
            "action_dim": env.action_dim,
            "max_repeat": self.augment.max_repeat,
            "hidden": list(self.ppo.hidden),
            "symmetric": self.ppo.symmetric,
        })

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "env": self.env,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "augment": asdict(self.augment),
            "ppo": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.ppo).items() if k != "seed"},
            "reward": asdict(self.reward),
            "env_params": dict(self.env_params),
            "randomization": {k: list(v) for k, v in asdict(self.randomization).items()},
            "pushes": {
                "random": {
                    "count": self.pushes.random.count,
                    "magnitude": list(self.pushes.random.magnitude),
                    "earliest_step": self.pushes.random.earliest_step,
                },
                "schedule": [[k, m] for k, m in self.pushes.schedule.pushes],
            },
            "eval": asdict(self.eval),
        }


DEFAULT_MARGIN = {"car": 20.0, "pendulum": math.pi / 2}


def _section(raw: dict, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(key, "must be a mapping")
    return value


def _build(cls, values: dict, prefix: str, **fixed):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{prefix}.{sorted(unknown)[0]}", "unknown field")
    try:
        return cls(**{**values, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from exc


def parse_config(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    raw = copy.deepcopy(raw)
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")

    env = raw.get("env")
    if env is None:
        raise ConfigError("env", "missing required field")
    if env not in ENVIRONMENTS:
        raise ConfigError("env", f"unknown environment {env!r}; expected one of {ENVIRONMENTS}")

    if "seeds" not in raw:
        raise ConfigError("seeds", "missing required field")
    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds", "must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "duplicate seeds")

    augment = _build(AugmentConfig, _section(raw, "augment"), "augment")
    ppo_raw = _section(raw, "ppo")
    if "seed" in ppo_raw:
        raise ConfigError("ppo.seed", "seeds are given by the top-level 'seeds' list")
    if "hidden" in ppo_raw:
        ppo_raw["hidden"] = tuple(ppo_raw["hidden"])
    ppo = _build(PPOConfig, ppo_raw, "ppo")

    reward_raw = {"margin": DEFAULT_MARGIN[env], **_section(raw, "reward")}
    reward = _build(RewardSettings, reward_raw, "reward")
    try:
        ToleranceSpec((0.0, 0.0), reward.margin, reward.value_at_margin)
    except ValueError as exc:
        raise ConfigError("reward", str(exc)) from exc

    env_params = _section(raw, "env_params")
    physical = dict(env_params)
    if env == "car" and "substeps" in physical:
        substeps = physical.pop("substeps")
        if not isinstance(substeps, int) or isinstance(substeps, bool) or substeps < 1:
            raise ConfigError("env_params.substeps", "must be a positive integer")
    _build(CarParams if env == "car" else PendulumParams, physical, "env_params")

    rand_raw = {k: tuple(v) for k, v in _section(raw, "randomization").items()}
    randomization = _build(DomainRandomizationSpec, rand_raw, "randomization")

    pushes_raw = _section(raw, "pushes")
    unknown = set(pushes_raw) - {"random", "schedule"}
    if unknown:
        raise ConfigError(f"pushes.{sorted(unknown)[0]}", "unknown field")
    random_raw = dict(pushes_raw.get("random") or {})
    if "magnitude" in random_raw:
        random_raw["magnitude"] = tuple(random_raw["magnitude"])
    random_pushes = _build(RandomPushes, random_raw, "pushes.random")
    try:
        schedule = PushSchedule(tuple((int(k), float(m)) for k, m in (pushes_raw.get("schedule") or [])))
        schedule.check_horizon(PendulumEnv().horizon)
    except (TypeError, ValueError) as exc:
        raise ConfigError("pushes.schedule", str(exc)) from exc

    eval_settings = _build(EvalSettings, _section(raw, "eval"), "eval")
    if eval_settings.episodes < 1:
        raise ConfigError("eval.episodes", "must be >= 1")

    name = raw.get("name")
    if name is not None and (not isinstance(name, str) or not name or "/" in name):
        raise ConfigError("name", "must be a non-empty string without '/'")

    return RunConfig(
        env=env,
        seeds=tuple(seeds),
        augment=augment,
        ppo=ppo,
        reward=reward,
        output_dir=str(raw.get("output_dir", "runs")),
        name=name,
        env_params=env_params,
        randomization=randomization,
        pushes=PushSettings(random_pushes, schedule),
        eval=eval_settings,
    )


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"invalid YAML: {exc}") from exc
    return parse_config(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
