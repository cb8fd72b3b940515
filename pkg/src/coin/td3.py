"""CIG-TD3 learner: actor, twin local critics, centralized critic, replay and training loop.

All agents share one actor, one twin local critic and one centralized critic
(parameter sharing). Replay records are agent-centric: the ego agent's data
plus the other agents' states/actions padded to ``n_slots`` with a mask.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Mlp, MlpSpec, Module, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .critic import Baseline, CriticConfig, GlobalQ, elbo_from_posterior
from .env import ACTION_DIM, OBS_DIM, STATE_DIM, DrivingEnv, EnvConfig


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 256
    expl_noise: float = 0.05
    target_noise: float = 0.1
    noise_clip: float = 0.5
    policy_delay: int = 5
    lr_actor: float = 2e-4
    lr_critic: float = 3e-4
    hidden: int = 256
    step_start: int = 5000
    step_max: int = 1_000_000
    buffer_size: int = 500_000
    agent_margin: int = 8
    updates_per_step: int = 1
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be >= 1")
        if self.batch_size < 1 or self.buffer_size < 1:
            raise ValueError("batch_size and buffer_size must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.agent_margin < 0 or self.updates_per_step < 0:
            raise ValueError("agent_margin and updates_per_step must be >= 0")


@dataclass(frozen=True)
class Ablation:
    use_vae: bool = True
    use_gat: bool = True
    use_global_critic: bool = True

    @classmethod
    def from_names(cls, names) -> "Ablation":
        flags = {"use_vae": True, "use_gat": True, "use_global_critic": True}
        for name in names or ():
            key = {"no_vae": "use_vae", "no_gat": "use_gat", "itd3": "use_global_critic"}.get(name)
            if key is None:
                raise ValueError(f"unknown ablation {name!r} (choose from no_vae, no_gat, itd3)")
            flags[key] = False
        return cls(**flags)


class DivergenceError(FloatingPointError):
    pass


class InsufficientDataError(ValueError):
    pass


# -- networks -------------------------------------------------------------------
class Actor(Module):
    def __init__(self, hidden: int, rng: np.random.Generator):
        spec = MlpSpec((OBS_DIM, hidden, hidden, ACTION_DIM), ("leaky_relu", "leaky_relu", "tanh"))
        self.net = Mlp(spec, rng, last_scale=0.01)

    def __call__(self, o) -> Tensor:
        return self.net(o)


class TwinQ(Module):
    def __init__(self, hidden: int, rng: np.random.Generator):
        spec = MlpSpec.simple(OBS_DIM + ACTION_DIM, (hidden, hidden), 1)
        self.q1 = Mlp(spec, rng)
        self.q2 = Mlp(spec, rng)

    def __call__(self, o, a, heads=(1, 2)):
        x = ad.concat([ad.as_tensor(o), ad.as_tensor(a)], axis=-1)
        return tuple((self.q1 if k == 1 else self.q2)(x)[..., 0] for k in heads)


# -- replay ---------------------------------------------------------------------
BATCH_FIELDS = ("o", "s", "s_oth", "a", "a_oth", "mask", "r_i", "r_g", "d", "o2", "s2", "s_oth2", "a_oth2")


@dataclass
class Batch:
    o: np.ndarray
    s: np.ndarray
    s_oth: np.ndarray
    a: np.ndarray
    a_oth: np.ndarray
    mask: np.ndarray
    r_i: np.ndarray
    r_g: np.ndarray
    d: np.ndarray
    o2: np.ndarray
    s2: np.ndarray
    s_oth2: np.ndarray
    a_oth2: np.ndarray

    def __len__(self) -> int:
        return len(self.r_i)


class ReplayBuffer:
    """Ring buffer of agent-centric records with ``n_slots`` padded neighbour entries."""

    def __init__(self, capacity: int, n_slots: int, ring: bool = True):
        self.capacity, self.n_slots, self.ring = capacity, n_slots, ring
        shapes = {"o": (OBS_DIM,), "s": (STATE_DIM,), "s_oth": (n_slots, STATE_DIM), "a": (ACTION_DIM,),
                  "a_oth": (n_slots, ACTION_DIM), "mask": (n_slots,), "r_i": (), "r_g": (), "d": (),
                  "o2": (OBS_DIM,), "s2": (STATE_DIM,), "s_oth2": (n_slots, STATE_DIM),
                  "a_oth2": (n_slots, ACTION_DIM)}
        self.data = {k: np.zeros((capacity, *shp), dtype=bool if k == "mask" else np.float64)
                     for k, shp in shapes.items()}
        self.ptr = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, o, s, a, others, r_i, r_g, d, o2, s2) -> None:
        """``others`` is a list of (s_j, a_j, s2_j, a2_j) for the other agents."""
        if len(others) > self.n_slots:
            raise ValueError(f"{len(others)} other agents exceed the {self.n_slots} neighbour slots")
        if self.size == self.capacity and not self.ring:
            raise OverflowError("replay buffer is full and ring overwrite is disabled")
        k, D, n = self.ptr, self.data, len(others)
        D["o"][k], D["s"][k], D["a"][k] = o, s, a
        D["r_i"][k], D["r_g"][k], D["d"][k] = r_i, r_g, float(d)
        D["o2"][k], D["s2"][k] = o2, s2
        for key in ("s_oth", "a_oth", "s_oth2", "a_oth2"):
            D[key][k] = 0.0
        D["mask"][k] = False
        D["mask"][k, :n] = True
        for m, (sj, aj, sj2, aj2) in enumerate(others):
            D["s_oth"][k, m], D["a_oth"][k, m], D["s_oth2"][k, m], D["a_oth2"][k, m] = sj, aj, sj2, aj2
        self.ptr = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def get(self, idx) -> Batch:
        return Batch(**{k: self.data[k][idx] for k in BATCH_FIELDS})

    def sample_indices(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        if self.size <= batch_size:
            raise InsufficientDataError(f"buffer holds {self.size} records, need more than {batch_size}")
        return rng.choice(self.size, batch_size, replace=False)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        return self.get(self.sample_indices(rng, batch_size))


def store_step(buffer: ReplayBuffer, ids, obs, states, actions, result, next_actions) -> int:
    """One record per agent active at this step; returns the number stored."""
    for i in ids:
        others = [(states[j], actions[j], result.states[j], next_actions[j]) for j in ids if j != i]
        buffer.add(obs[i], states[i], actions[i], others, result.reward_individual[i], result.reward_global,
                   result.done[i], result.obs[i], result.states[i])
    return len(ids)


# -- learner --------------------------------------------------------------------
def _loss_value(loss: Tensor, what: str) -> float:
    v = float(loss.data)
    if not np.isfinite(v):
        raise DivergenceError(f"non-finite {what} loss ({v})")
    return v


class CigTd3:
    def __init__(self, cfg: TrainConfig, critic_cfg: CriticConfig = CriticConfig(),
                 ablation: Ablation = Ablation(), n_slots: int = 8, seed: int | None = None):
        cfg.validate()
        critic_cfg.validate()
        self.cfg, self.critic_cfg, self.ablation, self.n_slots = cfg, critic_cfg, ablation, n_slots
        seed = cfg.seed if seed is None else seed
        init, self.rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
        H = cfg.hidden
        self.actor = Actor(H, init)
        self.local = TwinQ(H, init)
        self.actor_targ = Actor(H, init)
        self.local_targ = TwinQ(H, init)
        self.actor_targ.copy_from(self.actor)
        self.local_targ.copy_from(self.local)
        self.opt_actor = Adam(self.actor.parameters(), cfg.lr_actor)
        self.opt_local = Adam(self.local.parameters(), cfg.lr_critic)
        self.use_global = ablation.use_global_critic
        if self.use_global:
            self.gq = GlobalQ(critic_cfg, init, ablation.use_vae, ablation.use_gat)
            self.gq_targ = GlobalQ(critic_cfg, init, ablation.use_vae, ablation.use_gat)
            self.gq_targ.copy_from(self.gq)
            self.baseline = Baseline(critic_cfg, init, ablation.use_gat)
            self.opt_global = Adam(self.gq.parameters() + self.baseline.parameters(), cfg.lr_critic)
        self.critic_updates = 0
        self.actor_updates = 0

    # -- acting ---------------------------------------------------------------------
    def policy(self, o) -> np.ndarray:
        with ad.no_grad():
            return np.clip(self.actor(np.asarray(o, dtype=np.float64)).data, -1.0, 1.0)

    def select_action(self, o, explore: bool, rng: np.random.Generator | None = None) -> np.ndarray:
        a = self.policy(o)
        if explore:
            a = np.clip(a + (rng or self.rng).normal(0.0, self.cfg.expl_noise, size=a.shape), -1.0, 1.0)
        return a

    @staticmethod
    def warmup_action(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(ACTION_DIM,) if n is None else (n, ACTION_DIM))

    def target_action(self, o2, rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
        o2 = np.asarray(o2, dtype=np.float64)
        with ad.no_grad():
            mu = self.actor_targ(o2).data
        if noise is None:
            noise = (rng or self.rng).normal(0.0, self.cfg.target_noise, size=mu.shape)
        eps = np.clip(noise, -self.cfg.noise_clip, self.cfg.noise_clip)
        return np.clip(mu + eps, -1.0, 1.0)

    # -- targets --------------------------------------------------------------------
    def local_target(self, b: Batch, a2) -> np.ndarray:
        with ad.no_grad():
            t1, t2 = self.local_targ(b.o2, a2)
        return b.r_i + self.cfg.gamma * (1.0 - b.d) * np.minimum(t1.data, t2.data)

    def global_target(self, b: Batch, a2) -> np.ndarray:
        with ad.no_grad():
            t1, t2 = self.gq_targ(b.o2, a2, b.s2, b.s_oth2, b.a_oth2, b.mask)
        return b.r_g + self.cfg.gamma * (1.0 - b.d) * np.minimum(t1.data, t2.data)

    # -- updates --------------------------------------------------------------------
    def local_critic_update(self, b: Batch, a2=None) -> float:
        a2 = self.target_action(b.o2) if a2 is None else a2
        y = self.local_target(b, a2)
        q1, q2 = self.local(b.o, b.a)
        loss = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
        value = _loss_value(loss, "local critic")
        loss.backward()
        self.opt_local.step()
        return value

    def global_losses(self, b: Batch, a2, noise):
        y = self.global_target(b, a2)
        if self.ablation.use_vae:
            mu, logvar = self.gq.posterior(b.o, b.s, b.a, b.s_oth, b.a_oth)
            q1, q2 = self.gq.forward_with_latents(b.o, b.a, b.s, b.s_oth, b.a_oth, mu, b.mask)
            s_j, a_j = GlobalQ.pairs(b.s, b.a, b.s_oth, b.a_oth)
            pair_mask = np.concatenate([np.ones((len(b), 1), dtype=bool), b.mask], axis=1)
            target = np.concatenate([b.o2, b.s2, b.r_i[:, None]], axis=1)
            elbo, _, _ = elbo_from_posterior(self.gq.cvae, mu, logvar, b.o, b.s, s_j.data, b.a, a_j.data,
                                             target, pair_mask, noise, self.critic_cfg.beta_kl)
        else:
            q1, q2 = self.gq(b.o, b.a, b.s, b.s_oth, b.a_oth, b.mask)
            elbo = Tensor(0.0)
        critic = ((q1 - y) ** 2).mean() + ((q2 - y) ** 2).mean()
        v = self.baseline(b.o, b.s, b.s_oth, b.a_oth, b.mask)
        base = ((v - y) ** 2).mean()
        return critic, elbo, base

    def elbo_noise(self, b: Batch, rng: np.random.Generator | None = None) -> np.ndarray | None:
        if not self.ablation.use_vae:
            return None
        return (rng or self.rng).standard_normal((len(b), self.n_slots + 1, self.critic_cfg.latent_dim))

    def global_critic_update(self, b: Batch, a2=None, noise=None) -> tuple:
        a2 = self.target_action(b.o2) if a2 is None else a2
        noise = self.elbo_noise(b) if noise is None else noise
        critic, elbo, base = self.global_losses(b, a2, noise)
        total = critic + elbo + base
        values = (_loss_value(critic, "global critic"), _loss_value(elbo, "elbo"), _loss_value(base, "baseline"))
        total.backward()
        self.opt_global.step()
        return values

    def actor_loss(self, b: Batch) -> Tensor:
        a = self.actor(b.o)
        nets = [self.local] + ([self.gq, self.baseline] if self.use_global else [])
        with ad.frozen(*nets):
            (q,) = self.local(b.o, a, heads=(1,))
            obj = q
            if self.use_global:
                (qg,) = self.gq(b.o, a, b.s, b.s_oth, b.a_oth, b.mask, heads=(1,))
                with ad.no_grad():
                    v = self.baseline(b.o, b.s, b.s_oth, b.a_oth, b.mask)
                obj = obj + qg - v
        return -obj.mean()

    def actor_update(self, b: Batch) -> float:
        loss = self.actor_loss(b)
        value = _loss_value(loss, "actor")
        loss.backward()
        self.opt_actor.step()
        self.actor_updates += 1
        return value

    def soft_update_targets(self) -> None:
        tau = self.cfg.tau
        ad.soft_update(self.actor_targ, self.actor, tau)
        ad.soft_update(self.local_targ, self.local, tau)
        if self.use_global:
            ad.soft_update(self.gq_targ, self.gq, tau)

    def update(self, b: Batch, a2=None, noise=None) -> dict:
        """One critic update; actor + target update every ``policy_delay`` critic updates."""
        a2 = self.target_action(b.o2) if a2 is None else a2
        out = {"loss_local": self.local_critic_update(b, a2)}
        if self.use_global:
            out["loss_global"], out["loss_elbo"], out["loss_baseline"] = self.global_critic_update(b, a2, noise)
        self.critic_updates += 1
        if self.critic_updates % self.cfg.policy_delay == 0:
            out["loss_actor"] = self.actor_update(b)
            self.soft_update_targets()
        return out

    # -- persistence ----------------------------------------------------------------
    def modules(self) -> dict:
        mods = {"actor": self.actor, "actor_targ": self.actor_targ, "local": self.local, "local_targ": self.local_targ}
        if self.use_global:
            mods.update(gq=self.gq, gq_targ=self.gq_targ, baseline=self.baseline)
        return mods

    def optimizers(self) -> dict:
        opts = {"opt_actor": self.opt_actor, "opt_local": self.opt_local}
        if self.use_global:
            opts["opt_global"] = self.opt_global
        return opts

    def state_dict(self) -> dict:
        out = {}
        for name, m in self.modules().items():
            out.update({f"{name}.{k}": v for k, v in m.state_dict().items()})
        for name, opt in self.optimizers().items():
            out.update(opt.state_dict(prefix=f"{name}."))
        return out

    def load_state_dict(self, state: dict, modules_only: bool = False) -> None:
        for name, m in self.modules().items():
            m.load_state_dict({k[len(name) + 1:]: v for k, v in state.items() if k.startswith(name + ".")})
        if not modules_only:
            for name, opt in self.optimizers().items():
                opt.load_state_dict(state, prefix=f"{name}.")


# -- training loop ----------------------------------------------------------------
class CheckpointMismatchError(ValueError):
    pass


def load_actor(path, hidden: int) -> Actor:
    tensors, _ = load_checkpoint(path)
    actor = Actor(hidden, np.random.default_rng(0))
    try:
        actor.load_state_dict({k[len("actor."):]: v for k, v in tensors.items() if k.startswith("actor.")})
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatchError(f"{path}: actor does not match the configured network shape: {exc}") from exc
    return actor


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


@dataclass
class TrainResult:
    learner: CigTd3
    steps: int
    critic_updates: int
    actor_updates: int
    records: int
    log: list = field(default_factory=list)


def train(env_cfg: EnvConfig, cfg: TrainConfig, critic_cfg: CriticConfig = CriticConfig(),
          ablation: Ablation = Ablation(), out_dir=None, log_every: int = 1000, eval_every: int = 0,
          eval_seeds=(), checkpoint_every: int = 0, eval_horizon: int | None = None,
          meta: dict | None = None) -> TrainResult:
    """Algorithm-1 loop. Writes ``checkpoints/``, ``logs/train.jsonl`` and ``reports/`` under ``out_dir``."""
    from .evaluation import evaluate, write_report

    cfg.validate()
    env_cfg.validate()
    n_slots = env_cfg.n_agents - 1 + cfg.agent_margin
    learner = CigTd3(cfg, critic_cfg, ablation, n_slots)
    ss = np.random.SeedSequence(cfg.seed).spawn(5)[2:]
    act_rng, batch_rng, env_rng = (np.random.default_rng(s) for s in ss)
    buffer = ReplayBuffer(cfg.buffer_size, n_slots)
    env = DrivingEnv(env_cfg)
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        for sub in ("checkpoints", "logs", "reports"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        log_file = open(out / "logs" / "train.jsonl", "w")

    def choose(obs: dict, step: int) -> dict:
        ids = sorted(obs)
        if not ids:
            return {}
        if step < cfg.step_start:
            acts = learner.warmup_action(act_rng, len(ids))
        else:
            acts = learner.select_action(np.stack([obs[i] for i in ids]), True, act_rng)
        return {i: acts[k] for k, i in enumerate(ids)}

    def new_episode():
        o, s = env.reset(int(env_rng.integers(2**31)))
        return o, s

    def checkpoint(path, step):
        tensors = learner.state_dict()
        m = dict(meta or {})
        m.update(step=step, critic_updates=learner.critic_updates, actor_updates=learner.actor_updates,
                 rng={"policy": _rng_state(learner.rng), "action": _rng_state(act_rng),
                      "batch": _rng_state(batch_rng), "env_seed": _rng_state(env_rng), "env": _rng_state(env.rng)})
        save_checkpoint(path, tensors, m)

    def emit(record):
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

    history: list = []
    obs, states = new_episode()
    actions = choose(obs, 0)
    returns: dict = {}
    finished_returns: list = []
    losses: dict = {}
    records = 0
    step = 0
    try:
        for step in range(cfg.step_max):
            ids = env.active_ids
            result = env.step(actions)
            for i in ids:
                returns[i] = returns.get(i, 0.0) + result.reward_individual[i]
            cont = [i for i in ids if not result.done[i]]
            next_actions = choose({i: result.obs[i] for i in ids}, step + 1)
            records += store_step(buffer, ids, obs, states, actions, result, next_actions)
            for i in ids:
                if result.done[i]:
                    finished_returns.append(returns.pop(i))
            obs = {i: result.obs[i] for i in cont}
            states = {i: result.states[i] for i in cont}
            actions = {i: next_actions[i] for i in cont}
            for i, (o_r, s_r) in result.respawned.items():
                obs[i], states[i] = o_r, s_r
            fresh = choose({i: obs[i] for i in result.respawned}, step + 1)
            actions.update(fresh)
            if result.truncated or not env.active_ids:
                finished_returns.extend(returns.values())
                returns = {}
                obs, states = new_episode()
                actions = choose(obs, step + 1)

            if step >= cfg.step_start and len(buffer) > cfg.batch_size:
                for _ in range(cfg.updates_per_step):
                    stats = learner.update(buffer.sample_batch(batch_rng, cfg.batch_size))
                    for k, v in stats.items():
                        losses.setdefault(k, []).append(v)

            n = step + 1
            if log_every and n % log_every == 0:
                rec = {"step": n, "records": records, "critic_updates": learner.critic_updates,
                       "actor_updates": learner.actor_updates,
                       "episode_return_mean": float(np.mean(finished_returns)) if finished_returns else None,
                       "lives_finished": len(finished_returns)}
                rec.update({k: float(np.mean(v)) for k, v in sorted(losses.items())})
                emit(rec)
                finished_returns, losses = [], {}
            if eval_every and eval_seeds and n % eval_every == 0:
                report = evaluate(learner.actor, env_cfg, list(eval_seeds), horizon=eval_horizon)
                emit({"step": n, "eval": report.aggregate_dict()})
                if out is not None:
                    write_report(report, out / "reports", f"eval_step{n}")
            if out is not None and checkpoint_every and n % checkpoint_every == 0:
                checkpoint(out / "checkpoints" / f"step{n}.ckpt", n)
        if out is not None:
            checkpoint(out / "checkpoints" / "final.ckpt", cfg.step_max)
    except DivergenceError as exc:
        if out is not None:
            checkpoint(out / "checkpoints" / "divergence_dump.ckpt", step)
        emit({"step": step, "error": str(exc)})
        raise
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(learner, cfg.step_max, learner.critic_updates, learner.actor_updates, records, history)

