"""Simulation benchmarks for trained policies.

* velocity tracking: RMS forward-velocity error under constant random commands on flat ground;
* orientation: RMS distance of the body-frame gravity vector from upright over a
  60 s template command trajectory;
* traversal: fraction of trials that cross a maximum-difficulty terrain.

A robot that terminates early keeps contributing an error for the rest of the
trial (a standstill for tracking, its last attitude for orientation), so
falling is never cheaper than tracking badly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import world
from .env import BipedEnv
from .terrain import flat_terrain, generate_terrain


@dataclass(frozen=True)
class EvalConfig:
    tracking_trials: int = 128
    tracking_duration: float = 10.0
    orientation_trials: int = 4
    traversal_trials: int = 20
    traversal_time: float = 15.0
    traversal_speed: float = 0.8
    traversal_kinds: tuple = ("flat", "slope", "stairs", "rough_profiles")
    observation_noise: bool = True
    seed: int = 12345

    def __post_init__(self):
        if min(self.tracking_trials, self.orientation_trials, self.traversal_trials) < 1:
            raise ValueError("trial counts must be >= 1")
        if not (self.tracking_duration > 0 and self.traversal_time > 0):
            raise ValueError("durations must be positive")


@dataclass(frozen=True)
class TemplateTrajectory:
    """Piecewise-linear forward-velocity command: (duration, start, end) segments."""

    segments: tuple = (
        (10.0, 0.0, 1.2),    # ramp up
        (10.0, 1.2, 1.2),    # hold
        (5.0, 0.0, 0.0),     # step to zero
        (10.0, 0.0, -0.8),   # ramp backwards
        (10.0, -0.8, -0.8),  # hold
        (5.0, 0.0, 0.0),     # step to zero
        (10.0, 0.0, 0.6),    # ramp forward
    )

    def __post_init__(self):
        if any(d <= 0 for d, _, _ in self.segments):
            raise ValueError("segment durations must be positive")
        if max(max(abs(a), abs(b)) for _, a, b in self.segments) > 1.2 + 1e-12:
            raise ValueError("template commands exceed 1.2 m/s")

    @property
    def duration(self) -> float:
        return float(sum(d for d, _, _ in self.segments))

    def command_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        start = 0.0
        for d, a, b in self.segments:
            sel = (t >= start) & (t < start + d)
            out = np.where(sel, a + (b - a) * (t - start) / d, out)
            start += d
        last = self.segments[-1]
        return np.where(t >= start, last[2], out)


def rms(errors) -> float:
    e = np.asarray(errors, dtype=float)
    return float(np.sqrt(np.mean(e * e))) if e.size else 0.0


def gravity_deviation(pitch) -> np.ndarray:
    """Distance between the body-frame unit gravity vector and its upright value."""
    return 2.0 * np.abs(np.sin(0.5 * np.asarray(pitch, dtype=float)))


class PolicyRunner:
    """Deterministic policy: mean action with the mean latent."""

    def __init__(self, ac, params):
        self.ac, self.params = ac, params

    def __call__(self, ob) -> np.ndarray:
        return self.ac.act(self.params, ob.history, ob.obs, ob.cmd, None, stochastic=False).action


def _eval_env_config(env_cfg, duration: float, noise: bool):
    return replace(env_cfg, max_episode_time=duration, randomize_domain=False, use_curriculum=False,
                   noise=env_cfg.noise if noise else world.NoiseScales.zero())


def _run(policy, env, steps: int, measure, command_fn=None, dead_value=None):
    """Step every robot for ``steps`` and record ``measure`` per step.

    After a robot's first termination its entry is frozen at ``dead_value``
    (default: the value measured at termination).
    """
    n = env.num_envs
    alive = np.ones(n, dtype=bool)
    frozen = np.zeros(n)
    out = np.zeros((steps, n))
    ob = env.reset()
    dt = env.cfg.sim.policy_dt
    for k in range(steps):
        if command_fn is not None:
            env.set_vx_command(command_fn(k * dt))
            ob = env._observation_bundle()
        res = env.step(policy(ob))
        value = measure(env, res)
        ended = alive & res.done & (k < steps - 1)
        frozen = np.where(ended, value if dead_value is None else dead_value, frozen)
        out[k] = np.where(alive, value, frozen)
        alive &= ~ended
        ob = res.obs
    return out, alive


def eval_velocity_tracking(policy, env_cfg, cfg: EvalConfig, trials: int | None = None,
                           duration: float | None = None, seed: int | None = None) -> float:
    """RMS forward-velocity error over constant random commands on flat ground."""
    trials = trials or cfg.tracking_trials
    duration = duration or cfg.tracking_duration
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    ecfg = _eval_env_config(env_cfg, duration, cfg.observation_noise)
    vx = rng.uniform(-1.2, 1.2, trials)
    cmd = world.fixed_command(vx, trials, ecfg.commands)
    maps = [flat_terrain(ecfg.terrain)] * trials
    env = BipedEnv(ecfg, trials, int(rng.integers(2**31)), command_override=cmd, terrain_maps=maps)
    steps = int(round(duration / ecfg.sim.policy_dt))
    errors, _ = _run(policy, env, steps, lambda e, r: e.last_state.base_vx - vx, dead_value=-vx)
    return rms(errors)


def eval_orientation(policy, env_cfg, cfg: EvalConfig, template: TemplateTrajectory | None = None,
                     seed: int | None = None) -> float:
    """RMS gravity-vector deviation while following the template on flat ground."""
    template = template or TemplateTrajectory()
    trials = cfg.orientation_trials
    rng = np.random.default_rng((cfg.seed if seed is None else seed) + 1)
    ecfg = _eval_env_config(env_cfg, template.duration, cfg.observation_noise)
    cmd = world.fixed_command(0.0, trials, ecfg.commands)
    maps = [flat_terrain(ecfg.terrain)] * trials
    env = BipedEnv(ecfg, trials, int(rng.integers(2**31)), command_override=cmd, terrain_maps=maps)
    steps = int(round(template.duration / ecfg.sim.policy_dt))
    dev, _ = _run(policy, env, steps, lambda e, r: gravity_deviation(e.last_state.base_pitch),
                  command_fn=lambda t: template.command_at(t))
    return rms(dev)


def eval_traversal(policy, env_cfg, cfg: EvalConfig, kind: str, trials: int | None = None,
                   seed: int | None = None) -> float:
    """Success rate of crossing a maximum-level terrain of ``kind`` under a forward command."""
    trials = trials or cfg.traversal_trials
    base_seed = cfg.seed if seed is None else seed
    ecfg = _eval_env_config(env_cfg, cfg.traversal_time, cfg.observation_noise)
    spec = ecfg.terrain
    maps = [generate_terrain(kind, spec.max_level, base_seed + i, spec) for i in range(trials)]
    cmd = world.fixed_command(cfg.traversal_speed, trials, ecfg.commands)
    env = BipedEnv(ecfg, trials, base_seed + 2, command_override=cmd, terrain_maps=maps)
    steps = int(round(cfg.traversal_time / ecfg.sim.policy_dt))
    goal = spec.course_end
    crossed = np.zeros(trials, dtype=bool)
    alive = np.ones(trials, dtype=bool)
    ob = env.reset()
    for _ in range(steps):
        res = env.step(policy(ob))
        x = env.last_state.base_x
        crossed |= alive & ~env.last_terminated & (x >= goal)
        alive &= ~res.done
        ob = res.obs
        if not alive.any():
            break
    return float(crossed.mean())
