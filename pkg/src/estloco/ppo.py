"""Rollout collection, generalized advantage estimation and the PPO update."""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import nn
from .checkpoint import save_checkpoint
from .policy import ActorCritic, Batch, LossWeights, loss_and_grad


class TrainingFault(RuntimeError):
    """Raised when the loss or gradient becomes non-finite."""


@dataclass(frozen=True)
class PpoConfig:
    num_envs: int = 256
    epochs: int = 4
    minibatches: int = 4
    learning_rate: float = 5e-4
    gamma: float = 0.996
    lam: float = 0.95
    horizon: int = 50
    clip: float = 0.2
    max_updates: int = 1500
    seed: int = 0
    desired_kl: float = 0.01
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    max_grad_norm: float = 1.0
    adaptive_lr: bool = True
    normalize_advantages: bool = True
    checkpoint_every: int = 100

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lambda must lie in (0, 1]")
        if min(self.num_envs, self.epochs, self.minibatches, self.horizon) < 1:
            raise ValueError("num_envs, epochs, minibatches and horizon must be >= 1")
        if self.max_updates < 0:
            raise ValueError("max_updates must be >= 0")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("learning-rate bounds must satisfy 0 < lr_min <= lr_max")


class RolloutBuffer(NamedTuple):
    obs: np.ndarray        # (T, B, obs)
    history: np.ndarray    # (T, B, H, obs)
    priv: np.ndarray
    cmd: np.ndarray
    target: np.ndarray
    actions: np.ndarray
    log_prob: np.ndarray   # (T, B)
    eps_z: np.ndarray
    rewards: np.ndarray    # (T, B)
    values: np.ndarray     # (T, B)
    dones: np.ndarray      # (T, B)
    last_values: np.ndarray  # (B,)
    term_means: dict
    episodes: list

    @property
    def size(self) -> int:
        return self.rewards.size


def collect_rollouts(ac: ActorCritic, params: np.ndarray, env, horizon: int, rng: np.random.Generator,
                     first_obs):
    """Run the stochastic policy for ``horizon`` steps in every environment."""
    d, b, est = ac.dims, env.num_envs, ac.dims.est
    shape = (horizon, b)
    buf = {
        "obs": np.zeros(shape + (d.obs,)), "history": np.zeros(shape + (d.history, d.obs)),
        "priv": np.zeros(shape + (d.priv,)), "cmd": np.zeros(shape + (d.cmd,)),
        "target": np.zeros(shape + (est,)), "actions": np.zeros(shape + (d.act,)),
        "log_prob": np.zeros(shape), "eps_z": np.zeros(shape + (ac.spec.latent_dim,)),
        "rewards": np.zeros(shape), "values": np.zeros(shape), "dones": np.zeros(shape),
    }
    term_sums: dict = {}
    episodes = []
    ob = first_obs
    for t in range(horizon):
        out = ac.act(params, ob.history, ob.obs, ob.cmd, rng, stochastic=True)
        buf["obs"][t], buf["history"][t], buf["priv"][t], buf["cmd"][t] = ob.obs, ob.history, ob.priv, ob.cmd
        buf["target"][t] = ob.priv[:, :est]
        buf["actions"][t], buf["log_prob"][t], buf["eps_z"][t] = out.action, out.log_prob, out.eps_z
        buf["values"][t] = ac.value(params, ob.obs, ob.priv, ob.cmd)
        res = env.step(out.action)
        buf["rewards"][t] = res.reward
        buf["dones"][t] = res.done
        for k, v in res.terms.items():
            term_sums[k] = term_sums.get(k, 0.0) + float(np.sum(v))
        episodes.extend(res.episodes)
        ob = res.obs
    last_values = ac.value(params, ob.obs, ob.priv, ob.cmd)
    n = horizon * b
    term_means = {k: v / n for k, v in term_sums.items()}
    return RolloutBuffer(**buf, last_values=last_values, term_means=term_means, episodes=episodes), ob


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float, normalize: bool = False):
    """Backward GAE recursion over a (T, B) rollout; returns (advantages, returns)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_values, dtype=float)
    running = np.zeros_like(next_value)
    for t in range(rewards.shape[0] - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * live * next_value - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    returns = adv + values
    if normalize:
        adv = normalize_advantages(adv)
    return adv, returns


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 0 else 1.0)


def adapt_learning_rate(lr: float, kl: float, cfg: PpoConfig) -> float:
    if kl > 1.5 * cfg.desired_kl:
        lr = lr / 2.0
    elif kl < cfg.desired_kl / 1.5:
        lr = lr * 2.0
    return float(min(max(lr, cfg.lr_min), cfg.lr_max))


def _flat(x):
    return x.reshape((x.shape[0] * x.shape[1],) + x.shape[2:])


def ppo_update(ac: ActorCritic, params: np.ndarray, adam: nn.AdamState, buffer: RolloutBuffer,
               advantages: np.ndarray, returns: np.ndarray, weights: LossWeights, cfg: PpoConfig,
               rng: np.random.Generator):
    """Epochs of minibatch Adam steps on the composite loss; returns (params, adam, stats)."""
    data = Batch(_flat(buffer.obs), _flat(buffer.history), _flat(buffer.priv), _flat(buffer.cmd),
                 _flat(buffer.target), _flat(buffer.actions), buffer.log_prob.ravel(), _flat(buffer.eps_z),
                 advantages.ravel(), returns.ravel())
    n = data.obs.shape[0]
    mb = max(1, n // cfg.minibatches)
    totals: dict = {}
    count = 0
    params = params.copy()
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for k in range(cfg.minibatches):
            idx = order[k * mb:(k + 1) * mb] if k < cfg.minibatches - 1 else order[k * mb:]
            batch = Batch(*(a[idx] for a in data))
            loss, grad, stats = loss_and_grad(ac, params, batch, weights)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingFault(f"non-finite loss or gradient (loss={loss})")
            norm = float(np.linalg.norm(grad))
            stats["grad_norm"] = norm
            if cfg.max_grad_norm and norm > cfg.max_grad_norm:
                grad = grad * (cfg.max_grad_norm / norm)
            if cfg.adaptive_lr:
                adam = adam.with_lr(adapt_learning_rate(adam.lr, stats["approx_kl"], cfg))
            adam, params = nn.adam_step(adam, params, grad)
            ac.project(params)
            for key, v in stats.items():
                totals[key] = totals.get(key, 0.0) + v
            count += 1
    out = {k: v / count for k, v in totals.items()}
    out["learning_rate"] = adam.lr
    return params, adam, out


def checkpoint_header(run, ac: ActorCritic, update: int, extra: dict | None = None) -> dict:
    header = {
        "group": ac.spec.name,
        "estimation": {"explicit": list(ac.spec.explicit), "latent_dim": ac.spec.latent_dim,
                       "decoder": ac.spec.decoder, "encoder": ac.spec.encoder},
        "dims": ac.dims._asdict(),
        "sizes": {"backbone": list(ac.sizes.backbone), "encoder": list(ac.sizes.encoder),
                  "decoder": list(ac.sizes.decoder), "critic": list(ac.sizes.critic),
                  "init_log_std": ac.sizes.init_log_std},
        "widths": {name: list(net.widths) for name, net in ac.nets.items()},
        "seed": run.seed,
        "update": update,
        "config_ini": run.to_ini(),
    }
    if extra:
        header.update(extra)
    return header


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def train(run, out_dir, *, log=None) -> dict:
    """Alternate rollouts and updates; stream metrics and write checkpoints.

    ``run`` is a run configuration (see :mod:`estloco.config`). The metrics
    stream holds only seed-determined quantities; wall-clock times go to a
    separate timing stream so that reruns reproduce it byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg: PpoConfig = run.ppo
    env = run.make_env(cfg.num_envs, run.seed)
    ac = run.make_actor_critic(env.dims)
    rng = np.random.default_rng([run.seed, 7])
    params = ac.init_params(rng)
    adam = nn.AdamState.zeros(ac.n_params, cfg.learning_rate)
    recent = deque(maxlen=10)
    obs = env.reset()
    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
    start = time.perf_counter()
    with open(metrics_path, "w") as metrics_fh, open(timing_path, "w") as timing_fh:
        for update in range(1, cfg.max_updates + 1):
            t0 = time.perf_counter()
            buffer, obs = collect_rollouts(ac, params, env, cfg.horizon, rng, obs)
            t1 = time.perf_counter()
            adv, ret = compute_gae(buffer.rewards, buffer.values, buffer.dones, buffer.last_values,
                                   cfg.gamma, cfg.lam, normalize=cfg.normalize_advantages)
            params, adam, stats = ppo_update(ac, params, adam, buffer, adv, ret, run.weights, cfg, rng)
            t2 = time.perf_counter()
            returns = [e["return"] for e in buffer.episodes]
            recent.extend(returns)
            record = {
                "update": update,
                "mean_episode_reward": _clean(float(np.mean(returns))) if returns else None,
                "episodes": len(returns),
                "mean_step_reward": float(buffer.rewards.mean()),
                "reward_terms": buffer.term_means,
                **{k: _clean(float(v)) for k, v in stats.items()},
            }
            if buffer.episodes and "distance" in buffer.episodes[0]:
                record["mean_episode_length"] = float(np.mean([e["length"] for e in buffer.episodes]))
                record["mean_distance"] = float(np.mean([e["distance"] for e in buffer.episodes]))
            if hasattr(env, "curriculum"):
                record["mean_terrain_level"] = float(env.curriculum.levels.mean())
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()
            timing_fh.write(json.dumps({"update": update, "rollout_s": t1 - t0, "update_s": t2 - t1,
                                        "wall_s": t2 - start}) + "\n")
            timing_fh.flush()
            if log:
                log(f"update {update}/{cfg.max_updates} reward={record['mean_episode_reward']} "
                    f"step={record['mean_step_reward']:.4f} kl={stats['approx_kl']:.4f} "
                    f"lr={adam.lr:.2e} ({t2 - t0:.1f}s)")
            if cfg.checkpoint_every and update % cfg.checkpoint_every == 0 and update < cfg.max_updates:
                save_checkpoint(out / f"update_{update:05d}.ckpt", checkpoint_header(run, ac, update), params)
    r_final = float(np.mean(recent)) if recent else None
    header = checkpoint_header(run, ac, cfg.max_updates, {"r_final": r_final})
    save_checkpoint(out / "final.ckpt", header, params)
    return {"r_final": r_final, "checkpoint": str(out / "final.ckpt"), "updates": cfg.max_updates,
            "faults": getattr(env, "faults", 0)}
