"""Desk-scale training experiments behind the slow acceptance checks.

``sanity``: one agent on the straight road, ITD3 ablation.
``coordination``: four agents on a shrunken one-lane intersection, COIN
versus the ITD3 ablation over three training seeds.

Each run writes its usual run directory plus a JSON summary under ``results/``.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .critic import CriticConfig
from .env import EnvConfig
from .evaluation import evaluate, write_report
from .geometry import GeometryParams
from .td3 import Ablation, TrainConfig, train

EVAL_SEEDS = tuple(range(20))
EVAL_HORIZON = 1000


@dataclass(frozen=True)
class Experiment:
    env: EnvConfig
    train: TrainConfig
    critic: CriticConfig = field(default_factory=CriticConfig)
    ablation: Ablation = field(default_factory=Ablation)


SANITY = Experiment(
    env=EnvConfig(scenario="straight", n_agents=1, respawn=False, horizon=300),
    train=TrainConfig(step_start=2000, step_max=30_000, buffer_size=100_000),
    ablation=Ablation(use_global_critic=False),
)

TOY_INTERSECTION = EnvConfig(scenario="intersection", n_agents=4, horizon=1000,
                             geometry=GeometryParams(lanes_per_direction=1, arm_length=30.0))
COORD_TRAIN = TrainConfig(hidden=64, batch_size=64, step_start=5000, step_max=200_000, buffer_size=200_000,
                          agent_margin=0)
COORD_CRITIC = CriticConfig(node_dim=64, hidden=64)
COORDINATION = {
    "coin": Experiment(TOY_INTERSECTION, COORD_TRAIN, COORD_CRITIC, Ablation()),
    "itd3": Experiment(TOY_INTERSECTION, COORD_TRAIN, COORD_CRITIC, Ablation(use_global_critic=False)),
}


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(exp: Experiment, seed: int, out_dir, log_every: int = 5000) -> dict:
    """Train with ``seed``, then evaluate the final actor on the 20 fixed seeds."""
    out = Path(out_dir)
    t0 = time.perf_counter()
    cfg = replace(exp.train, seed=seed)
    res = train(exp.env, cfg, exp.critic, exp.ablation, out_dir=out, log_every=log_every, meta={"seed": seed})
    train_s = time.perf_counter() - t0
    report = evaluate(res.learner.actor, exp.env, EVAL_SEEDS, horizon=EVAL_HORIZON, gamma=cfg.gamma)
    txt, rows = write_report(report, out / "reports", "final")
    ckpt = out / "checkpoints" / "final.ckpt"
    return {"seed": seed, "steps": cfg.step_max, "train_seconds": train_s,
            "seconds": time.perf_counter() - t0, "metrics": report.aggregate_dict(),
            "checkpoint_sha256": sha256(ckpt), "report_sha256": sha256(rows), "report_txt_sha256": sha256(txt)}


def write_json(path, data) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def run_sanity(root, seed: int = 0) -> dict:
    """Criterion-9 run, repeated once more with the same seed for the determinism check."""
    root = Path(root)
    first = run(SANITY, seed, root / "sanity" / "run_a")
    second = run(SANITY, seed, root / "sanity" / "run_b")
    return {"experiment": "sanity", "config": _describe(SANITY), "eval_seeds": list(EVAL_SEEDS),
            "eval_horizon": EVAL_HORIZON, "runs": [first, second]}


def run_coordination(root, seeds=(0, 1, 2), methods=("coin", "itd3"), on_result=None) -> dict:
    root = Path(root)
    out = {"experiment": "coordination", "eval_seeds": list(EVAL_SEEDS), "eval_horizon": EVAL_HORIZON,
           "config": {m: _describe(COORDINATION[m]) for m in methods}, "runs": {m: [] for m in methods}}
    for seed in seeds:
        for m in methods:
            out["runs"][m].append(run(COORDINATION[m], seed, root / "coordination" / f"{m}_seed{seed}"))
            if on_result is not None:
                on_result(out)
    return out


def _describe(exp: Experiment) -> dict:
    from .config import to_dict

    return {"env": to_dict(exp.env), "train": to_dict(exp.train), "critic": to_dict(exp.critic),
            "ablation": to_dict(exp.ablation)}
