"""Episode and cross-seed metrics, plus their CSV/JSON writers."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .envcore import AugmentConfig, Trajectory, frequency_of


@dataclass
class EpisodeReport:
    penalized_return: float
    unpenalized_return: float
    n_decisions: int
    n_base_steps: int
    avg_frequency: float
    jitter: list[float]
    frequency_trace: list[float]

    @property
    def mean_jitter(self) -> float:
        return float(np.mean(self.jitter)) if self.jitter else 0.0


SCALAR_FIELDS = ("penalized_return", "unpenalized_return", "n_decisions", "n_base_steps", "avg_frequency", "mean_jitter")


def jitter_series(applied_actions) -> list[float]:
    """Euclidean norm of consecutive action differences."""
    a = np.asarray(applied_actions, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if len(a) < 2:
        raise ValueError("jitter needs at least two actions")
    return np.linalg.norm(np.diff(a, axis=0), axis=1).tolist()


def episode_metrics(trajectory: Trajectory, cfg: AugmentConfig, f_max: float | None = None) -> EpisodeReport:
    """All per-episode metrics.  ``cfg.switch_cost`` is the cost used for the penalized return."""
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    f_max = trajectory.f_max if f_max is None else f_max
    unpenalized = 0.0
    for r in trajectory.base_rewards():
        unpenalized += r
    n_dec = len(trajectory)
    n_steps = trajectory.n_base_steps
    applied = trajectory.applied_actions()
    return EpisodeReport(
        penalized_return=unpenalized - cfg.switch_cost * n_dec,
        unpenalized_return=unpenalized,
        n_decisions=n_dec,
        n_base_steps=n_steps,
        avg_frequency=n_dec * f_max / n_steps,
        jitter=jitter_series(applied) if len(applied) >= 2 else [],
        frequency_trace=[frequency_of(d.action.duration, f_max) for d in trajectory.decisions],
    )


@dataclass
class MetricSummary:
    mean: float
    std: float | None
    stderr: float | None


@dataclass
class AggregateReport:
    n_seeds: int
    metrics: dict[str, MetricSummary]
    # set when fewer than two seeds were given: only means are meaningful
    insufficient_seeds: bool = False

    def to_dict(self) -> dict:
        return {
            "n_seeds": self.n_seeds,
            "insufficient_seeds": self.insufficient_seeds,
            "metrics": {k: asdict(v) for k, v in self.metrics.items()},
        }


def aggregate(values_per_seed: Sequence[dict[str, float]] | Sequence[EpisodeReport]) -> AggregateReport:
    """Mean, sample standard deviation and standard error per metric across seeds.

    Accepts either ``EpisodeReport`` objects or plain ``{metric: value}``
    dicts (one per seed).  Values are sorted before summing so the result
    does not depend on seed order.
    """
    rows = [_scalars(v) for v in values_per_seed]
    if not rows:
        raise ValueError("nothing to aggregate")
    n = len(rows)
    out = {}
    for key in rows[0]:
        xs = sorted(float(r[key]) for r in rows)
        mean = math.fsum(xs) / n
        if n < 2:
            out[key] = MetricSummary(mean, None, None)
            continue
        var = math.fsum((x - mean) ** 2 for x in xs) / (n - 1)
        std = math.sqrt(var)
        out[key] = MetricSummary(mean, std, std / math.sqrt(n))
    return AggregateReport(n, out, insufficient_seeds=n < 2)


def _scalars(item) -> dict[str, float]:
    if isinstance(item, EpisodeReport):
        return {k: getattr(item, k) for k in SCALAR_FIELDS}
    return dict(item)


def mean_reports(reports: Sequence[EpisodeReport]) -> dict[str, float]:
    """Average the scalar fields of several episodes (one seed's evaluation)."""
    return {k: math.fsum(getattr(r, k) for r in reports) / len(reports) for k in SCALAR_FIELDS}


# ---------------------------------------------------------------- file output

def write_episodes_csv(path, rows: Sequence[tuple[int, int, EpisodeReport]]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", "episode", *SCALAR_FIELDS])
        for seed, ep, rep in rows:
            w.writerow([seed, ep, *(_fmt(getattr(rep, k)) for k in SCALAR_FIELDS)])


def write_jitter_csv(path, rows: Sequence[tuple[int, int, EpisodeReport]]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", "episode", "step", "value"])
        for seed, ep, rep in rows:
            for step, v in enumerate(rep.jitter, start=1):
                w.writerow([seed, ep, step, _fmt(v)])


def write_freq_trace_csv(path, rows: Sequence[tuple[int, int, list]]):
    """``rows`` holds ``(seed, episode, [TracePoint, ...])``."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", "episode", "time_s", "dt", "hz", "push_flag"])
        for seed, ep, trace in rows:
            for item in trace:
                w.writerow([seed, ep, _fmt(item.time_s), item.duration, _fmt(item.hz), int(item.push)])


def write_summary_json(path, report: AggregateReport, extra: dict | None = None):
    payload = {**(extra or {}), **report.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass(frozen=True)
class TracePoint:
    time_s: float
    step: int
    duration: int
    hz: float
    push: bool


def frequency_trace(trajectory: Trajectory, push_steps: Sequence[int] = ()) -> list[TracePoint]:
    """Per-decision frequency; ``push`` marks the decision whose hold window contains a push."""
    steps = set(push_steps)
    points = []
    for d in trajectory.decisions:
        t0 = d.state.time_index
        window = range(t0, t0 + d.transition.steps_consumed)
        points.append(TracePoint(
            time_s=t0 / trajectory.f_max,
            step=t0,
            duration=d.action.duration,
            hz=frequency_of(d.action.duration, trajectory.f_max),
            push=any(k in steps for k in window),
        ))
    return points


@dataclass(frozen=True)
class SpikeCheck:
    """Qualitative push response of one frequency trace."""
    pre_push_modal_dt: int
    spiked: tuple[bool, ...]      # per push: dt == 1 within the response window
    recovered: tuple[bool, ...]   # per push: modal dt > 1 in the recovery window

    @property
    def ok(self) -> bool:
        return self.pre_push_modal_dt > 1 and all(self.spiked) and all(self.recovered)


def _modal(durations) -> int:
    # ties go to the longer hold, i.e. the lower frequency
    counts = Counter(durations)
    return max(counts, key=lambda d: (counts[d], d))


def spike_check(trace: Sequence[TracePoint], push_steps: Sequence[int], window: int = 5,
                recovery_steps: int = 100) -> SpikeCheck:
    """Did the policy drop to ``dt = 1`` right after each push, then relax again?

    The response window is the first ``window`` decisions that start after the
    push; the recovery window covers decisions starting within
    ``recovery_steps`` base steps after the response window ends.
    """
    if not push_steps:
        raise ValueError("spike check needs at least one push")
    first = min(push_steps)
    pre = [p.duration for p in trace if p.step + p.duration <= first]
    if not pre:
        raise ValueError("no decisions before the first push")
    spiked, recovered = [], []
    for k in push_steps:
        after = [p for p in trace if p.step > k]
        response = after[:window]
        spiked.append(any(p.duration == 1 for p in response))
        if len(after) <= window:
            recovered.append(False)
            continue
        start = after[window].step
        tail = [p.duration for p in after[window:] if p.step < start + recovery_steps]
        recovered.append(_modal(tail) > 1)
    return SpikeCheck(_modal(pre), tuple(spiked), tuple(recovered))
