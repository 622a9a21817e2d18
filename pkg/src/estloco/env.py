"""Vectorized training environments.

``BipedEnv`` runs many planar bipeds in lock-step, each with its own terrain,
command and randomized physics. ``PointMassEnv`` is a one-dimensional
velocity-tracking task with the same interface, used to smoke-test PPO.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import sim, world
from .rewards import RewardConfig, compute_reward, gait_phase_coefficients, reward_inputs
from .kernels import gaussian_kernel
from .terrain import (TERRAIN_KINDS, CurriculumConfig, CurriculumState, TerrainBatch, TerrainSpec,
                      terrain_bank, update_curriculum)


class Dims(NamedTuple):
    obs: int
    priv: int
    est: int
    cmd: int
    act: int
    history: int


BIPED_DIMS = Dims(world.OBS_DIM, world.PRIV_DIM, world.EST_DIM, world.CMD_DIM, world.ACT_DIM,
                  world.HISTORY_LEN)


class EnvObs(NamedTuple):
    """What the learner sees at one step (leading dimension = environments)."""

    obs: np.ndarray        # (B, obs) delivered proprioception o_t
    history: np.ndarray    # (B, H, obs) delivered frames t-H .. t-1, oldest first
    priv: np.ndarray       # (B, priv)
    cmd: np.ndarray        # (B, cmd)


class StepResult(NamedTuple):
    obs: EnvObs
    reward: np.ndarray
    done: np.ndarray
    terms: dict
    episodes: list         # finished-episode summaries


@dataclass(frozen=True)
class EnvConfig:
    model: sim.RobotModel = field(default_factory=sim.RobotModel)
    sim: sim.SimConfig = field(default_factory=sim.SimConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    terrain: TerrainSpec = field(default_factory=TerrainSpec)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    commands: world.CommandRanges = field(default_factory=world.CommandRanges)
    domain: world.DomainRanges = field(default_factory=world.DomainRanges)
    obs_scales: world.ObsScales = field(default_factory=world.ObsScales)
    noise: world.NoiseScales = field(default_factory=world.NoiseScales)
    terrain_kinds: tuple = TERRAIN_KINDS
    max_episode_time: float = 10.0
    randomize_domain: bool = True
    use_curriculum: bool = True
    start_level: int = 0
    stance_range: tuple = (0.10, 0.18)
    terrain_seed: int = 0
    termination_height_fraction: float = 0.4
    termination_pitch: float = 1.0

    def __post_init__(self):
        if not self.terrain_kinds:
            raise ValueError("at least one terrain kind is required")
        unknown = set(self.terrain_kinds) - set(TERRAIN_KINDS)
        if unknown:
            raise ValueError(f"unknown terrain kinds {sorted(unknown)}")
        if not self.max_episode_time > 0:
            raise ValueError("max_episode_time must be positive")


def action_scale(model: sim.RobotModel) -> np.ndarray:
    """Largest symmetric excursion around the nominal pose that stays within joint limits."""
    nominal = model.nominal_joint_pose()
    return np.minimum(np.asarray(model.joint_upper) - nominal, nominal - np.asarray(model.joint_lower))


class BipedEnv:
    """Batch of planar bipeds driven by normalized actions in [-1, 1]^4."""

    dims = BIPED_DIMS

    def __init__(self, cfg: EnvConfig, num_envs: int, seed: int, *, bank: dict | None = None,
                 command_override: world.Command | None = None,
                 kinds: list | None = None, terrain_maps: list | None = None):
        self.cfg = cfg
        self.num_envs = num_envs
        self.rng = np.random.default_rng(seed)
        self.noise_rng = np.random.default_rng([seed, 1])
        if bank is None and terrain_maps is None:
            bank = terrain_bank(cfg.terrain, cfg.terrain_kinds, cfg.terrain_seed)
        self.bank = bank
        self.nominal = cfg.model.nominal_joint_pose()
        self.scale = action_scale(cfg.model)
        self.limits = sim.TerminationLimits.for_model_height(cfg.model, cfg.termination_height_fraction,
                                                             cfg.termination_pitch)
        self.max_steps = int(round(cfg.max_episode_time / cfg.sim.policy_dt))
        self.command_override = command_override
        # Fixed per-robot terrains bypass the bank and the curriculum.
        self.terrain_maps = terrain_maps
        if terrain_maps is not None:
            if len(terrain_maps) != num_envs:
                raise ValueError("need one terrain map per environment")
            kinds = [m.kind for m in terrain_maps]
        self.kinds = list(kinds) if kinds is not None else \
            [cfg.terrain_kinds[i % len(cfg.terrain_kinds)] for i in range(num_envs)]
        max_level = cfg.terrain.max_level
        self.curriculum = CurriculumState(
            np.full(num_envs, min(cfg.start_level, max_level)), max_level,
            cfg.curriculum.promote_fraction * cfg.terrain.course_length,
            cfg.curriculum.demote_fraction * cfg.max_episode_time)
        # Placeholders, filled by reset().
        b = num_envs
        self.domain = world.nominal_domain(b)
        self.params = sim.body_params(cfg.model, b)
        self.command = world.fixed_command(0.0, b, cfg.commands)
        self.terrain = TerrainBatch.from_maps([self._terrain_for(i) for i in range(b)])
        self.terrain.heights = self.terrain.heights.copy()
        self.state = sim.standing_state(cfg.model, self.terrain, b, params=self.params, cfg=cfg.sim)
        self.obs_history = world.ObservationHistory(b)
        self.policy_history = np.zeros((b, world.HISTORY_LEN, world.OBS_DIM))
        self.prev_action = np.zeros((b, world.ACT_DIM))
        self.prev_info = sim.StepInfo(np.zeros((b, 2, 2)), np.zeros((b, sim.NJOINT)), np.zeros(b, bool))
        self.prev_qdot = np.zeros((b, sim.NJOINT))
        self.fresh = np.ones(b, dtype=bool)
        self.episode_step = np.zeros(b, dtype=int)
        self.episode_return = np.zeros(b)
        self.start_x = np.zeros(b)
        self.current_obs = np.zeros((b, world.OBS_DIM))
        self.faults = 0

    # -- episode management -------------------------------------------------

    def reset(self) -> EnvObs:
        self._reset_envs(np.arange(self.num_envs))
        return self._observation_bundle()

    def _reset_envs(self, idx: np.ndarray) -> None:
        cfg, n = self.cfg, len(idx)
        if n == 0:
            return
        if cfg.randomize_domain:
            dom = world.sample_domain_params(self.rng, n, cfg.domain)
        else:
            dom = world.nominal_domain(n)
        self.domain.assign(idx, dom)
        self.params.assign(idx, dom.body(cfg.model))
        if self.command_override is not None:
            cmd = self.command_override.take(idx)
        else:
            cmd = world.sample_command(self.rng, cfg.commands, n)
        self.command.assign(idx, cmd)
        for i in idx:
            self.terrain.assign(i, self._terrain_for(i))
        stance = self.rng.uniform(*cfg.stance_range, n)
        sub_params = self.params.take(idx)
        fresh_state = sim.standing_state(cfg.model, self.terrain.take(idx), n, stance=stance,
                                         params=sub_params, cfg=cfg.sim)
        self.state.assign(idx, fresh_state)
        self.prev_action[idx] = 0.0
        self.prev_qdot[idx] = 0.0
        self.fresh[idx] = True
        self.episode_step[idx] = 0
        self.episode_return[idx] = 0.0
        self.start_x[idx] = fresh_state.base_x
        frame = world.true_observation(fresh_state, np.zeros((n, world.ACT_DIM)), self.nominal, cfg.obs_scales)
        sub_hist = world.ObservationHistory(n)
        sub_hist.reset(np.arange(n), frame)
        self.obs_history.frames[idx] = sub_hist.frames
        self.obs_history.count[idx] = sub_hist.count
        self.policy_history[idx] = 0.0
        self.current_obs[idx] = frame

    def _terrain_for(self, i: int):
        if self.terrain_maps is not None:
            return self.terrain_maps[i]
        return self.bank[(self.kinds[i], int(self.curriculum.levels[i]))]

    def _observation_bundle(self) -> EnvObs:
        priv = world.assemble_privileged(self.state, self.terrain, self.params)
        t = self.episode_step * self.cfg.sim.policy_dt
        return EnvObs(self.current_obs.copy(), self.policy_history.copy(), priv,
                      world.command_features(self.command, t))

    # -- stepping -----------------------------------------------------------

    def targets(self, action: np.ndarray) -> np.ndarray:
        return self.nominal + self.scale * action

    def step(self, action) -> StepResult:
        cfg = self.cfg
        action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
        state, feet, info = sim.step(self.state, self.targets(action), self.params, self.terrain, cfg.sim,
                                     limits=self.limits)
        self.episode_step += 1
        t = self.episode_step * cfg.sim.policy_dt
        phase = gait_phase_coefficients(self.command.gait_frequency, self.command.gait_duty,
                                        self.command.gait_offset, t, cfg.reward.gait_transition)
        fresh = self.fresh[:, None]
        prev_info = sim.StepInfo(
            np.where(fresh[:, :, None], info.foot_forces, self.prev_info.foot_forces),
            np.where(fresh, info.torques, self.prev_info.torques), self.prev_info.terminated)
        prev_qdot = np.where(fresh, state.joint_qdot, self.prev_qdot)
        inp = reward_inputs(prev_info, info, state, feet, self.command.vx_des, self.params.weight, prev_qdot)
        with np.errstate(all="ignore"):
            reward, terms = compute_reward(inp, phase, cfg.reward, cfg.model.nominal_base_height)
        bad = ~np.isfinite(reward)
        if np.any(bad):
            self.faults += int(bad.sum())
            reward = np.where(bad, 0.0, reward)
            terms = {k: np.where(bad, 0.0, v) for k, v in terms.items()}

        self.state = state
        # Post-step snapshot that survives the automatic reset below.
        self.last_state = state.copy()
        self.last_terminated = info.terminated
        self.prev_info = info
        self.prev_qdot = state.joint_qdot.copy()
        self.prev_action = action
        self.fresh[:] = False
        self.episode_return += reward

        timeout = self.episode_step >= self.max_steps
        done = info.terminated | timeout

        # Observation for the robots that keep going; reset ones are overwritten below.
        self.policy_history[:, :-1] = self.policy_history[:, 1:]
        self.policy_history[:, -1] = self.current_obs
        with np.errstate(all="ignore"):
            self.current_obs = world.observe(state, action, self.domain, self.noise_rng, self.obs_history,
                                             nominal_joints=self.nominal, scales=cfg.obs_scales,
                                             noise=cfg.noise)

        episodes = []
        idx = np.flatnonzero(done)
        if idx.size:
            distance = np.abs(np.nan_to_num(state.base_x[idx]) - self.start_x[idx])
            duration = self.episode_step[idx] * cfg.sim.policy_dt
            for j, i in enumerate(idx):
                episodes.append({
                    "return": float(self.episode_return[i]), "length": int(self.episode_step[i]),
                    "distance": float(distance[j]), "terminated": bool(info.terminated[i]),
                    "reason": info.reason[i] if info.reason else None,
                    "kind": self.kinds[i], "level": int(self.curriculum.levels[i]),
                })
            if cfg.use_curriculum:
                self.curriculum = update_curriculum(self.curriculum, distance, duration, idx)
            self._reset_envs(idx)
        return StepResult(self._observation_bundle(), reward, done, terms, episodes)

    def set_vx_command(self, vx) -> None:
        self.command.vx_des[:] = vx


class PointMassEnv:
    """One-dimensional velocity tracking with the velocity-tracking reward only.

    Observation: (velocity error, commanded velocity). The action is an
    acceleration in [-1, 1] * ``max_accel``. Episodes start within
    ``initial_error`` of the command and one step can close any error up to
    ``max_accel * dt``, so a per-step reward of alpha is attainable.
    """

    dims = Dims(obs=2, priv=1, est=1, cmd=1, act=1, history=0)

    def __init__(self, num_envs: int, seed: int, *, dt: float = 0.05, max_accel: float = 10.0,
                 initial_error: float = 0.4,
                 episode_steps: int = 50, reward: RewardConfig | None = None):
        self.num_envs = num_envs
        self.rng = np.random.default_rng(seed)
        if initial_error > max_accel * dt:
            raise ValueError("initial_error must be reachable in one step")
        self.dt, self.max_accel, self.episode_steps = dt, max_accel, episode_steps
        self.initial_error = initial_error
        self.kernel = (reward or RewardConfig()).kernels["r_v"]
        self.v = np.zeros(num_envs)
        self.v_des = np.zeros(num_envs)
        self.step_count = np.zeros(num_envs, dtype=int)
        self.episode_return = np.zeros(num_envs)

    @property
    def max_reward(self) -> float:
        return self.kernel.alpha

    def _reset_envs(self, idx):
        self.v_des[idx] = self.rng.uniform(-1.0, 1.0, len(idx))
        self.v[idx] = self.v_des[idx] + self.rng.uniform(-self.initial_error, self.initial_error, len(idx))
        self.step_count[idx] = 0
        self.episode_return[idx] = 0.0

    def _bundle(self) -> EnvObs:
        b = self.num_envs
        err = self.v_des - self.v
        obs = np.column_stack([err, self.v_des])
        return EnvObs(obs, np.zeros((b, 0, 2)), self.v[:, None].copy(), self.v_des[:, None].copy())

    def reset(self) -> EnvObs:
        self._reset_envs(np.arange(self.num_envs))
        return self._bundle()

    def step(self, action) -> StepResult:
        a = np.clip(np.asarray(action, dtype=float).reshape(self.num_envs), -1.0, 1.0)
        self.v = self.v + self.dt * self.max_accel * a
        reward = gaussian_kernel(self.kernel, np.abs(self.v_des - self.v))
        self.step_count += 1
        self.episode_return += reward
        done = self.step_count >= self.episode_steps
        episodes = [{"return": float(self.episode_return[i]), "length": int(self.step_count[i])}
                    for i in np.flatnonzero(done)]
        self._reset_envs(np.flatnonzero(done))
        return StepResult(self._bundle(), reward, done, {"r_v": reward}, episodes)

