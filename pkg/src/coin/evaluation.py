"""Deterministic evaluation episodes and the six outcome metrics.

A vehicle life still driving when the horizon ends is a timeout: it enters
the rate denominators but counts as neither success nor failure. Lives that
never took a step (horizon 0) are dropped.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .env import DrivingEnv, EnvConfig, Status, life_id, write_trace_csv

SUCCESS, COLLISION, OFF_ROAD, TIMEOUT = "success", "collision", "off_road", "timeout"
OUTCOME_OF = {Status.SUCCEEDED: SUCCESS, Status.COLLIDED: COLLISION, Status.OFF_ROAD: OFF_ROAD}


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class LifeRecord:
    life_id: str
    outcome: str
    steps: int
    discounted_return: float


@dataclass
class EpisodeLog:
    seed: int
    horizon: int
    lives: list
    global_rewards: list
    trace: list | None = None

    def count(self, outcome: str) -> int:
        return sum(1 for life in self.lives if life.outcome == outcome)

    def write_trace(self, path) -> None:
        write_trace_csv(path, self.trace or [])


def _as_policy(policy) -> Callable:
    if callable(getattr(policy, "parameters", None)):
        actor = policy

        def act(obs):
            with ad.no_grad():
                return np.clip(actor(obs).data, -1.0, 1.0)

        return act
    if callable(policy):
        return policy
    raise TypeError("policy must be an actor module or a callable mapping observations to actions")


def run_episode(policy, env_cfg: EnvConfig, seed: int, horizon: int | None = 1000, gamma: float = 0.99,
                trace: bool = False) -> EpisodeLog:
    """Roll out ``policy`` without exploration noise for ``horizon`` steps (None: env horizon)."""
    act = _as_policy(policy)
    horizon = env_cfg.horizon if horizon is None else int(horizon)
    env = DrivingEnv(env_cfg)
    if trace:
        env.enable_trace()
    obs, _ = env.reset(seed)
    running: dict = {}
    lives: list = []
    g_trace: list = []

    def start(i):
        running[i] = [life_id(i, env.vehicles[i].life), 0, 0.0]

    for i in obs:
        start(i)
    for _ in range(horizon):
        ids = env.active_ids
        if not ids:
            break
        acts = act(np.stack([obs[i] for i in ids]))
        result = env.step({i: acts[k] for k, i in enumerate(ids)})
        g_trace.append(result.reward_global)
        for i in ids:
            rec = running[i]
            rec[2] += gamma ** rec[1] * result.reward_individual[i]
            rec[1] += 1
            if result.done[i]:
                lives.append(LifeRecord(rec[0], OUTCOME_OF[result.status[i]], rec[1], rec[2]))
                del running[i]
        obs = {i: result.obs[i] for i in ids if not result.done[i]}
        for i, (o, _) in result.respawned.items():
            obs[i] = o
            start(i)
    for rec in running.values():
        if rec[1] > 0:
            lives.append(LifeRecord(rec[0], TIMEOUT, rec[1], rec[2]))
    return EpisodeLog(seed, horizon, lives, g_trace, env.trace)


# -- metrics -----------------------------------------------------------------------
METRIC_FIELDS = ("lives", "successes", "collisions", "off_roads", "timeouts", "success_rate", "collision_rate",
                 "off_road_rate", "timeout_rate", "safety", "efficiency", "average_travel_steps",
                 "mean_discounted_return", "global_return")


def log_metrics(log: EpisodeLog) -> dict:
    n = len(log.lives)
    s, c, o, t = (log.count(k) for k in (SUCCESS, COLLISION, OFF_ROAD, TIMEOUT))
    rate = (lambda k: 100.0 * k / n) if n else (lambda k: math.nan)
    steps = [life.steps for life in log.lives if life.outcome == SUCCESS]
    return {
        "lives": n, "successes": s, "collisions": c, "off_roads": o, "timeouts": t,
        "success_rate": rate(s), "collision_rate": rate(c), "off_road_rate": rate(o), "timeout_rate": rate(t),
        "safety": -(c + o), "efficiency": s - (c + o),
        "average_travel_steps": float(np.mean(steps)) if steps else math.nan,
        "mean_discounted_return": float(np.mean([x.discounted_return for x in log.lives])) if n else math.nan,
        "global_return": float(np.sum(log.global_rewards)),
    }


@dataclass
class MetricsReport:
    per_seed: list
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return self.mean["success_rate"]

    @property
    def collision_rate(self) -> float:
        return self.mean["collision_rate"]

    @property
    def off_road_rate(self) -> float:
        return self.mean["off_road_rate"]

    @property
    def safety(self) -> float:
        return self.mean["safety"]

    @property
    def efficiency(self) -> float:
        return self.mean["efficiency"]

    @property
    def average_travel_steps(self) -> float:
        return self.mean["average_travel_steps"]

    def aggregate_dict(self) -> dict:
        return {**{f"{k}_mean": _json_float(v) for k, v in self.mean.items()},
                **{f"{k}_std": _json_float(v) for k, v in self.std.items()}}


def _json_float(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def _nan_stat(values, fn) -> float:
    vals = np.asarray(values, dtype=np.float64)
    vals = vals[~np.isnan(vals)]
    return float(fn(vals)) if vals.size else math.nan


def compute_metrics(logs) -> MetricsReport:
    logs = list(logs)
    if not logs:
        raise EmptyInputError("compute_metrics needs at least one episode log")
    rows = [{"seed": log.seed, **log_metrics(log)} for log in logs]
    mean = {k: _nan_stat([r[k] for r in rows], np.mean) for k in METRIC_FIELDS}
    std = {k: _nan_stat([r[k] for r in rows], np.std) for k in METRIC_FIELDS}
    return MetricsReport(rows, mean, std)


def evaluate(policy, env_cfg: EnvConfig, seeds, horizon: int | None = 1000, gamma: float = 0.99,
             hidden: int | None = None) -> MetricsReport:
    """``policy`` is an actor, a callable, or a checkpoint path (then ``hidden`` is required)."""
    seeds = list(seeds)
    if not seeds:
        raise EmptyInputError("evaluate needs at least one seed")
    if isinstance(policy, (str, Path)):
        from .td3 import load_actor

        policy = load_actor(policy, hidden)
    logs = [run_episode(policy, env_cfg, s, horizon, gamma) for s in sorted(seeds)]
    return compute_metrics(logs)


# -- report files -------------------------------------------------------------------
def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "nan" if math.isnan(v) else f"{v:.6f}"


def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("row",) + METRIC_FIELDS)
    for r in report.per_seed:
        w.writerow([f"seed={r['seed']}"] + [_fmt(r[k]) for k in METRIC_FIELDS])
    w.writerow(["mean"] + [_fmt(report.mean[k]) for k in METRIC_FIELDS])
    w.writerow(["std"] + [_fmt(report.std[k]) for k in METRIC_FIELDS])
    return buf.getvalue()


def report_table(report: MetricsReport) -> str:
    cols = ("success_rate", "collision_rate", "off_road_rate", "safety", "efficiency", "average_travel_steps",
            "lives")
    head = f"{'seed':>8} " + " ".join(f"{c:>20}" for c in cols)
    lines = [head, "-" * len(head)]
    for r in report.per_seed:
        lines.append(f"{r['seed']:>8} " + " ".join(f"{_fmt(r[c]):>20}" for c in cols))
    lines.append("-" * len(head))
    lines.append(f"{'mean':>8} " + " ".join(f"{_fmt(report.mean[c]):>20}" for c in cols))
    lines.append(f"{'std':>8} " + " ".join(f"{_fmt(report.std[c]):>20}" for c in cols))
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, directory, stem: str = "metrics") -> tuple:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    txt, rows = d / f"{stem}.txt", d / f"{stem}.csv"
    txt.write_text(report_table(report))
    rows.write_text(report_csv(report))
    return txt, rows
