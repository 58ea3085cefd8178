"""Train / evaluate / sweep / perturb drivers shared by the CLI and the test suite.

Layout on disk::

    <output_dir>/<run_name>/config.yaml
    <output_dir>/<run_name>/summary.json
    <output_dir>/<run_name>/seed_<k>/checkpoint.bin
    <output_dir>/<run_name>/seed_<k>/train_log.csv
    <output_dir>/<run_name>/seed_<k>/{episodes,jitter,freq_trace}.csv
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .config import RunConfig, dump_config
from .envcore import AugmentConfig, rollout
from .metrics import (
    _fmt,
    EpisodeReport,
    aggregate,
    episode_metrics,
    frequency_trace,
    mean_reports,
    write_episodes_csv,
    write_freq_trace_csv,
    write_jitter_csv,
    write_summary_json,
)
from .policy import Actor, PolicyParams, load_checkpoint, save_checkpoint
from .ppo import LOG_FIELDS, TrainingDiverged, train

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"


class ArtifactMismatch(RuntimeError):
    pass


def write_train_log(path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in LOG_FIELDS])


def train_seed(cfg: RunConfig, seed: int, augmented: bool = True) -> tuple[PolicyParams, list[dict]]:
    """Train one seed and write its checkpoint and log under ``cfg.seed_dir(seed)``."""
    out = cfg.seed_dir(seed)
    out.mkdir(parents=True, exist_ok=True)
    ppo = replace(cfg.ppo, seed=seed)
    try:
        params, rows = train(cfg.make_env, ppo, cfg.augment, augmented=augmented)
    except TrainingDiverged as exc:
        (out / "divergence.json").write_text(json.dumps(exc.dump, indent=2, sort_keys=True) + "\n")
        raise
    write_train_log(out / "train_log.csv", rows)
    save_checkpoint(out / CHECKPOINT_NAME, params, cfg.policy_hash(), {"run_name": cfg.run_name, "seed": seed, "label": cfg.label})
    log.info("%s seed %d: final unpenalized return %.2f", cfg.run_name, seed, rows[-1]["mean_unpenalized_return"])
    return params, rows


def load_policy(cfg: RunConfig, path) -> PolicyParams:
    path = Path(path)
    if not path.exists():
        raise ArtifactMismatch(f"checkpoint {path} not found")
    try:
        params, header = load_checkpoint(path)
    except ValueError as exc:
        raise ArtifactMismatch(str(exc)) from exc
    if header["config_hash"] != cfg.policy_hash():
        raise ArtifactMismatch(
            f"checkpoint {path} was trained for a different environment/policy "
            f"(hash {header['config_hash']} != {cfg.policy_hash()})"
        )
    return params


def eval_switch_cost(cfg: RunConfig) -> float:
    return cfg.augment.switch_cost if cfg.eval.switch_cost is None else cfg.eval.switch_cost


def evaluate_policy(cfg: RunConfig, params: PolicyParams, seed: int, episodes: int,
                    switch_cost: float | None = None) -> list[tuple[EpisodeReport, list]]:
    """Deterministic-mode episodes; returns ``(report, frequency trace)`` per episode."""
    env = cfg.make_env()
    actor = Actor(params, deterministic=True)
    metric_cfg = AugmentConfig(cfg.augment.max_repeat, eval_switch_cost(cfg) if switch_cost is None else switch_cost,
                               cfg.augment.discount)
    results = []
    for ep in range(episodes):
        traj = rollout(env, actor, cfg.augment, [seed, 1_000_000 + ep])
        push_steps = env.schedule.steps if hasattr(env, "schedule") else ()
        results.append((episode_metrics(traj, metric_cfg), frequency_trace(traj, push_steps)))
    return results


@dataclass
class SeedEval:
    seed: int
    episodes: list[tuple[EpisodeReport, list]]

    @property
    def means(self) -> dict[str, float]:
        return mean_reports([r for r, _ in self.episodes])


def eval_seed(cfg: RunConfig, seed: int, episodes: int, checkpoint=None, params: PolicyParams | None = None) -> SeedEval:
    if params is None:
        params = load_policy(cfg, checkpoint or cfg.seed_dir(seed) / CHECKPOINT_NAME)
    result = SeedEval(seed, evaluate_policy(cfg, params, seed, episodes))
    out = cfg.seed_dir(seed)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(seed, ep, rep) for ep, (rep, _) in enumerate(result.episodes)]
    write_episodes_csv(out / "episodes.csv", rows)
    write_jitter_csv(out / "jitter.csv", rows)
    write_freq_trace_csv(out / "freq_trace.csv", [(seed, ep, tr) for ep, (_, tr) in enumerate(result.episodes)])
    return result


def write_run_summary(cfg: RunConfig, results: list[SeedEval]):
    run_dir = Path(cfg.output_dir) / cfg.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = [(r.seed, ep, rep) for r in results for ep, (rep, _) in enumerate(r.episodes)]
    write_episodes_csv(run_dir / "episodes.csv", rows)
    report = aggregate([r.means for r in results])
    write_summary_json(run_dir / "summary.json", report, {
        "run_name": cfg.run_name,
        "label": cfg.label,
        "env": cfg.env,
        "max_repeat": cfg.augment.max_repeat,
        "switch_cost": eval_switch_cost(cfg),
        "seeds": [r.seed for r in results],
    })
    return report


def _pmap(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class _TrainJob:
    def __init__(self, cfg, augmented=True):
        self.cfg, self.augmented = cfg, augmented

    def __call__(self, seed):
        train_seed(self.cfg, seed, self.augmented)
        return seed


class _EvalJob:
    def __init__(self, cfg, episodes, checkpoint=None):
        self.cfg, self.episodes, self.checkpoint = cfg, episodes, checkpoint

    def __call__(self, seed):
        return eval_seed(self.cfg, seed, self.episodes, self.checkpoint)


def write_config(cfg: RunConfig):
    run_dir = Path(cfg.output_dir) / cfg.run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_config(cfg))


def run_train(cfg: RunConfig, workers: int = 1):
    write_config(cfg)
    return _pmap(_TrainJob(cfg), list(cfg.seeds), workers)


def run_eval(cfg: RunConfig, episodes: int, checkpoint=None, workers: int = 1):
    results = _pmap(_EvalJob(cfg, episodes, checkpoint), list(cfg.seeds), workers)
    return results, write_run_summary(cfg, results)


SWEEP_FIELDS = ("switch_cost", "seed", "penalized_return", "unpenalized_return", "avg_frequency")


def run_sweep(cfg: RunConfig, costs, workers: int = 1, episodes: int | None = None) -> list[dict]:
    """Train and evaluate every seed for each switch cost (ascending); write ``sweep.csv``."""
    episodes = episodes or cfg.eval.episodes
    rows = []
    for c in sorted(costs):
        sub = replace(cfg.with_switch_cost(c), name=f"{cfg.run_name}_c{c:g}")
        run_train(sub, workers)
        results, _ = run_eval(sub, episodes, workers=workers)
        for r in results:
            m = r.means
            rows.append({"switch_cost": c, "seed": r.seed, **{k: m[k] for k in SWEEP_FIELDS[2:]}})
    out = Path(cfg.output_dir) / f"{cfg.run_name}_sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in SWEEP_FIELDS])
    return rows


def run_perturb(cfg: RunConfig, checkpoint=None):
    """Frequency trace of each seed's policy under ``cfg.pushes.schedule``."""
    if cfg.env != "pendulum":
        raise ArtifactMismatch(f"perturbation demo needs the pendulum environment, got {cfg.env!r}")
    schedule = cfg.pushes.schedule
    traces = []
    for seed in cfg.seeds:
        params = load_policy(cfg, checkpoint or cfg.seed_dir(seed) / CHECKPOINT_NAME)
        env = cfg.make_env(schedule=schedule)
        traj = rollout(env, Actor(params), cfg.augment, [seed, 2_000_000])
        traces.append((seed, 0, frequency_trace(traj, schedule.steps)))
    out = Path(cfg.output_dir) / cfg.run_name / "perturb"
    out.mkdir(parents=True, exist_ok=True)
    write_freq_trace_csv(out / "freq_trace.csv", traces)
    return traces
