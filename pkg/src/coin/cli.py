"""``coin`` command line: train, eval, export.

Output layout under the run directory::

    config.yaml      resolved configuration (re-parses to the same RunConfig)
    checkpoints/     final.ckpt and periodic step<N>.ckpt
    logs/            train.jsonl
    reports/         metric tables (.txt) and rows (.csv)
    exports/         trajectory and latent CSV files
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, parse_config, parse_overrides, write_config
from .env import DrivingEnv
from .evaluation import evaluate, report_table, run_episode, write_report
from .td3 import Ablation, CheckpointMismatchError, CigTd3, DivergenceError, load_actor, train

EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DIVERGED = 2, 3, 4


def parse_seeds(text: str) -> list:
    """``"0-19"``, ``"1,4,9"`` or a mix such as ``"0-3,10"``."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError(f"no seeds in {text!r}")
    return seeds


def _out_dir(cfg: RunConfig, out) -> Path:
    return Path(out if out is not None else cfg.io.output_dir)


def load_learner(path, cfg: RunConfig) -> CigTd3:
    tensors, _ = load_checkpoint(path)
    n_slots = cfg.env.n_agents - 1 + cfg.train.agent_margin
    learner = CigTd3(cfg.train, cfg.critic, cfg.ablation, n_slots)
    try:
        learner.load_state_dict(tensors, modules_only=True)
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatchError(f"{path}: networks do not match the configuration: {exc}") from exc
    return learner


# -- commands ----------------------------------------------------------------------
def cmd_train(args, overrides) -> int:
    cfg = parse_config(args.config, overrides)
    changes = {"train": dataclasses.replace(cfg.train, seed=args.seed),
               "env": dataclasses.replace(cfg.env, seed=args.seed)}
    if args.ablation:
        changes["ablation"] = Ablation.from_names(args.ablation)
    cfg = dataclasses.replace(cfg, **changes)
    out = _out_dir(cfg, args.out)
    write_config(cfg, out / "config.yaml")
    io = cfg.io
    result = train(cfg.env, cfg.train, cfg.critic, cfg.ablation, out_dir=out, log_every=io.log_every,
                   eval_every=io.eval_every, eval_seeds=io.eval_seeds, checkpoint_every=io.checkpoint_every,
                   eval_horizon=io.eval_horizon, meta={"seed": args.seed})
    print(f"trained {result.steps} steps ({result.critic_updates} critic / {result.actor_updates} actor updates);"
          f" checkpoint {out / 'checkpoints' / 'final.ckpt'}")
    return 0


def cmd_eval(args, overrides) -> int:
    cfg = parse_config(args.config, overrides)
    seeds = parse_seeds(args.seeds)
    actor = load_actor(args.checkpoint, cfg.train.hidden)
    report = evaluate(actor, cfg.env, seeds, horizon=args.horizon or cfg.io.eval_horizon, gamma=cfg.train.gamma)
    out = _out_dir(cfg, args.out)
    write_report(report, out / "reports", args.name)
    print(report_table(report), end="")
    return 0


def export_latents(learner: CigTd3, cfg: RunConfig, seed: int, horizon: int, path) -> int:
    if not (cfg.ablation.use_global_critic and cfg.ablation.use_vae):
        raise ConfigError("latent export needs a checkpoint trained with the CVAE (no itd3 / no_vae ablation)")
    env = DrivingEnv(cfg.env)
    obs, _ = env.reset(seed)
    rows = 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["agent_i", "agent_j", "step"] + [f"mu{k}" for k in range(cfg.critic.latent_dim)])
        for t in range(horizon):
            ids = env.active_ids
            if not ids:
                break
            acts = learner.policy(np.stack([obs[i] for i in ids]))
            if len(ids) > 1:
                states = np.stack([env.local_state(i) for i in ids])
                o = np.stack([obs[i] for i in ids])
                with ad.no_grad():
                    mu, _ = learner.gq.cvae.encode(o, states, np.broadcast_to(states, (len(ids),) + states.shape),
                                                   acts, np.broadcast_to(acts, (len(ids),) + acts.shape))
                names = [f"{i}-{env.vehicles[i].life}" for i in ids]
                for a, i in enumerate(ids):
                    for b, j in enumerate(ids):
                        if i != j:
                            w.writerow([names[a], names[b], t] + [f"{x:.9e}" for x in mu.data[a, b]])
                            rows += 1
            result = env.step({i: acts[k] for k, i in enumerate(ids)})
            obs = {i: result.obs[i] for i in ids if not result.done[i]}
            obs.update({i: o for i, (o, _) in result.respawned.items()})
    return rows


def cmd_export(args, overrides) -> int:
    cfg = parse_config(args.config, overrides)
    out = _out_dir(cfg, args.out) / "exports"
    out.mkdir(parents=True, exist_ok=True)
    horizon = args.horizon or cfg.io.eval_horizon
    if args.what == "trajectories":
        actor = load_actor(args.checkpoint, cfg.train.hidden)
        log = run_episode(actor, cfg.env, args.seed, horizon, cfg.train.gamma, trace=True)
        path = out / f"trajectories_seed{args.seed}.csv"
        log.write_trace(path)
    else:
        learner = load_learner(args.checkpoint, cfg)
        path = out / f"latents_seed{args.seed}.csv"
        export_latents(learner, cfg, args.seed, horizon, path)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coin", description="Train and evaluate CIG-TD3 driving agents.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ablation", nargs="+", choices=("no_vae", "no_gat", "itd3"), default=None)
    t.add_argument("--out", default=None, help="run directory (default: io.output_dir)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on fixed seeds")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--seeds", default="0-19")
    e.add_argument("--horizon", type=int, default=None)
    e.add_argument("--name", default="eval", help="report file stem")
    e.add_argument("--out", default=None)

    x = sub.add_parser("export", help="dump trajectories or pairwise latents as CSV")
    x.add_argument("--what", required=True, choices=("trajectories", "latents"))
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--config", required=True)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--horizon", type=int, default=None)
    x.add_argument("--out", default=None)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export}


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(rest)
        return COMMANDS[args.command](args, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, CheckpointMismatchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
