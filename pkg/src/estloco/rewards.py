"""Per-step locomotion reward built from the bell-shaped kernels.

Terms fall in three families: base command tracking (velocity, pitch rate,
uprightness, height), gait shaping (foot speed in stance, foot force in swing)
and smoothness/energy (impact, torque rate, joint-velocity rate, cost of
transport).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .kernels import KernelParams, cauchy_kernel, gaussian_kernel

TERM_NAMES = ("r_v", "r_omega", "r_r", "r_h", "r_eVel", "r_eFrc", "r_i", "r_tau", "r_qdot", "r_CoT")


def _default_kernels() -> dict:
    return {
        "r_v": KernelParams(alpha=0.1, sigma=0.02),
        "r_omega": KernelParams(alpha=0.1, sigma=0.02),
        "r_r": KernelParams(alpha=0.1, sigma=0.0025),
        "r_h": KernelParams(alpha=0.2, sigma=0.02),
        "r_eVel": KernelParams(alpha=0.1, beta=1, sigma=8.0),
        "r_eFrc": KernelParams(alpha=0.1, beta=1, sigma=8.0),
        "r_i": KernelParams(alpha=0.1, beta=3, sigma=0.2),
        "r_tau": KernelParams(alpha=0.1, beta=2, sigma=160.0),
        "r_qdot": KernelParams(alpha=0.1, beta=1, sigma=8.0),
        "r_CoT": KernelParams(alpha=0.1, beta=3, sigma=1.6),
    }


@dataclass(frozen=True)
class RewardConfig:
    kernels: dict = field(default_factory=_default_kernels)
    omega_target: float = 0.0
    # None means the model's nominal base height.
    height_target: float | None = None
    velocity_floor: float = 0.1
    # Track the vertical base velocity against zero alongside the forward command.
    track_vertical_velocity: bool = True
    gait_transition: float = 0.1

    def __post_init__(self):
        missing = set(TERM_NAMES) - set(self.kernels)
        if missing:
            raise ValueError(f"missing kernel parameters for {sorted(missing)}")
        if not self.velocity_floor > 0:
            raise ValueError("velocity_floor must be positive")

    def with_kernel(self, term: str, **changes) -> "RewardConfig":
        kernels = dict(self.kernels)
        old = kernels[term]
        kernels[term] = KernelParams(alpha=changes.get("alpha", old.alpha),
                                     sigma=changes.get("sigma", old.sigma),
                                     beta=changes.get("beta", old.beta))
        return RewardConfig(kernels, self.omega_target, self.height_target, self.velocity_floor,
                            self.track_vertical_velocity, self.gait_transition)

    @property
    def max_total(self) -> float:
        return float(sum(k.alpha for k in self.kernels.values()))


class GaitPhase(NamedTuple):
    phase: np.ndarray   # (B, 2) left, right in [0, 1)
    q_v: np.ndarray     # (B, 2) stance weight: penalize foot speed
    q_f: np.ndarray     # (B, 2) swing weight: penalize foot force


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _circular(d):
    return (d + 0.5) % 1.0 - 0.5


def gait_phase_coefficients(frequency, duty, offset, t, transition: float = 0.1) -> GaitPhase:
    """Deterministic swing/stance weights for both feet.

    A foot swings while its phase is below ``duty``. The swing weight ramps
    smoothly across a window of ``transition`` cycles centred on each phase
    boundary; the stance weight is its complement.
    """
    frequency = np.atleast_1d(np.asarray(frequency, dtype=float))
    duty = np.atleast_1d(np.asarray(duty, dtype=float))
    offset = np.atleast_1d(np.asarray(offset, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    base = frequency * t
    phase = np.stack([base % 1.0, (base + offset) % 1.0], axis=-1)
    d = duty[..., None]
    rise = _smoothstep(_circular(phase) / transition + 0.5)
    fall = _smoothstep(_circular(phase - d) / transition + 0.5)
    swing = rise * (1.0 - fall)
    return GaitPhase(phase=phase, q_v=1.0 - swing, q_f=swing)


class RewardInputs(NamedTuple):
    """Everything the reward reads, each with a leading batch dimension."""

    base_velocity: np.ndarray     # (B, 2) world (vx, vz)
    pitch: np.ndarray             # (B,)
    pitch_rate: np.ndarray        # (B,)
    base_height: np.ndarray       # (B,)
    foot_speed: np.ndarray        # (B, 2)
    foot_force: np.ndarray        # (B, 2) magnitudes
    foot_force_vec: np.ndarray    # (B, 2, 2) this step
    prev_foot_force_vec: np.ndarray
    torques: np.ndarray           # (B, 4)
    prev_torques: np.ndarray
    joint_qdot: np.ndarray        # (B, 4)
    prev_joint_qdot: np.ndarray
    weight: np.ndarray            # (B,) m g
    vx_des: np.ndarray            # (B,)


def reward_inputs(prev_info, cur_info, state, feet, vx_des, weight, prev_qdot) -> RewardInputs:
    """Gather reward inputs from simulator outputs of two consecutive policy steps."""
    return RewardInputs(
        base_velocity=np.column_stack([state.base_vx, state.base_vz]),
        pitch=state.base_pitch,
        pitch_rate=state.base_pitch_rate,
        base_height=state.base_height,
        foot_speed=feet.velocity,
        foot_force=feet.force,
        foot_force_vec=cur_info.foot_forces,
        prev_foot_force_vec=prev_info.foot_forces,
        torques=cur_info.torques,
        prev_torques=prev_info.torques,
        joint_qdot=state.joint_qdot,
        prev_joint_qdot=prev_qdot,
        weight=np.broadcast_to(np.asarray(weight, dtype=float), state.base_x.shape),
        vx_des=np.broadcast_to(np.asarray(vx_des, dtype=float), state.base_x.shape),
    )


def compute_reward(inp: RewardInputs, phase: GaitPhase, cfg: RewardConfig, height_target: float):
    """Return ``(total, breakdown)`` with one (B,) array per term."""
    k = cfg.kernels
    target_v = np.column_stack([inp.vx_des, np.zeros_like(inp.vx_des)])
    v_err = target_v - inp.base_velocity
    if not cfg.track_vertical_velocity:
        v_err = v_err[:, :1]
    speed = np.maximum(np.linalg.norm(inp.base_velocity, axis=1), cfg.velocity_floor)
    weight = inp.weight
    h_star = cfg.height_target if cfg.height_target is not None else height_target

    force_jump = (inp.foot_force_vec - inp.prev_foot_force_vec).reshape(len(weight), -1)
    power = np.sum(inp.torques * inp.joint_qdot, axis=1)

    terms = {
        "r_v": gaussian_kernel(k["r_v"], np.linalg.norm(v_err, axis=1)),
        "r_omega": gaussian_kernel(k["r_omega"], np.abs(cfg.omega_target - inp.pitch_rate)),
        "r_r": gaussian_kernel(k["r_r"], np.sin(inp.pitch) ** 2),
        "r_h": gaussian_kernel(k["r_h"], np.abs(h_star - inp.base_height)),
        "r_eVel": cauchy_kernel(k["r_eVel"], np.sum(phase.q_v * inp.foot_speed, axis=1)),
        "r_eFrc": cauchy_kernel(k["r_eFrc"], np.sum(phase.q_f * inp.foot_force, axis=1) / weight),
        "r_i": cauchy_kernel(k["r_i"], np.linalg.norm(force_jump, axis=1) / weight),
        "r_tau": cauchy_kernel(k["r_tau"], np.linalg.norm(inp.torques - inp.prev_torques, axis=1)),
        "r_qdot": cauchy_kernel(k["r_qdot"],
                                np.linalg.norm(inp.joint_qdot - inp.prev_joint_qdot, axis=1) / speed),
        "r_CoT": cauchy_kernel(k["r_CoT"], power / (weight * speed)),
    }
    total = np.zeros_like(weight, dtype=float)
    for name in TERM_NAMES:
        total = total + terms[name]
    return total, terms
