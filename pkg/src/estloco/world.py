"""Domain randomization, commands, and what the robot (and the critic) get to see.

The actor receives a normalized, noisy and delayed proprioceptive frame. The
critic additionally receives privileged ground truth: base velocity, base
height and heightmaps sampled from the terrain.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .sim import FOOT_ROWS, BodyParams, RobotModel, RobotState, body_params, kinematics

OBS_DIM = 15
PRIV_DIM = 24
EST_DIM = 13
CMD_DIM = 4
ACT_DIM = 4
HISTORY_LEN = 50

# Slices into the privileged vector. The first three make up the
# explicitly-estimable target e_t.
PRIV_VELOCITY = slice(0, 2)
PRIV_HEIGHT = slice(2, 3)
PRIV_FOOT_HMAP = slice(3, 13)
PRIV_BASE_HMAP = slice(13, 24)

FOOT_HMAP_OFFSETS = np.linspace(-0.1, 0.1, 5)
BASE_HMAP_OFFSETS = np.linspace(-1.0, 1.0, 11)

OBS_CHANNELS = ("gravity", "pitch_rate", "joint_pos", "joint_vel", "prev_action")
_CHANNEL_WIDTH = {"gravity": 2, "pitch_rate": 1, "joint_pos": 4, "joint_vel": 4, "prev_action": 4}


@dataclass(frozen=True)
class DomainRanges:
    base_com_offset: tuple = (-0.15, 0.15)
    payload_mass: tuple = (-2.0, 12.5)
    friction_rate: tuple = (0.25, 1.25)
    motor_strength_factor: tuple = (0.8, 1.2)
    kp_factor: tuple = (0.9, 1.1)
    kd_factor: tuple = (0.9, 1.1)
    latency_steps: tuple = (0, 2)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ValueError(f"{f.name}: lower bound {lo} exceeds upper bound {hi}")


@dataclass
class DomainParams:
    """Per-robot physical perturbations, one entry per environment."""

    base_com_offset: np.ndarray
    payload_mass: np.ndarray
    friction_rate: np.ndarray
    motor_strength_factor: np.ndarray
    kp_factor: np.ndarray
    kd_factor: np.ndarray
    latency_steps: np.ndarray

    @property
    def batch(self) -> int:
        return self.payload_mass.shape[0]

    def take(self, idx) -> "DomainParams":
        return DomainParams(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def assign(self, idx, other: "DomainParams") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def body(self, model: RobotModel) -> BodyParams:
        return body_params(model, self.batch, com_offset=self.base_com_offset, payload=self.payload_mass,
                           kp_factor=self.kp_factor, kd_factor=self.kd_factor,
                           motor_strength=self.motor_strength_factor, friction_rate=self.friction_rate)


def nominal_domain(batch: int = 1, latency: int = 0) -> DomainParams:
    """Unperturbed parameters (used for evaluation and tests)."""
    return DomainParams(
        base_com_offset=np.zeros(batch), payload_mass=np.zeros(batch), friction_rate=np.ones(batch),
        motor_strength_factor=np.ones(batch), kp_factor=np.ones(batch), kd_factor=np.ones(batch),
        latency_steps=np.full(batch, int(latency)),
    )


def sample_domain_params(rng: np.random.Generator, size: int = 1,
                         ranges: DomainRanges | None = None) -> DomainParams:
    """Independent uniform draws within ``ranges``; latency is a uniform integer."""
    r = ranges or DomainRanges()
    return DomainParams(
        base_com_offset=rng.uniform(*r.base_com_offset, size),
        payload_mass=rng.uniform(*r.payload_mass, size),
        friction_rate=rng.uniform(*r.friction_rate, size),
        motor_strength_factor=rng.uniform(*r.motor_strength_factor, size),
        kp_factor=rng.uniform(*r.kp_factor, size),
        kd_factor=rng.uniform(*r.kd_factor, size),
        latency_steps=rng.integers(r.latency_steps[0], r.latency_steps[1] + 1, size),
    )


@dataclass(frozen=True)
class CommandRanges:
    gait_frequency: tuple = (1.6, 2.2)
    gait_duty: tuple = (0.35, 0.45)
    gait_offset: tuple = (0.5, 0.5)
    vx_des: tuple = (-1.2, 1.2)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ValueError(f"{f.name}: lower bound {lo} exceeds upper bound {hi}")
        if self.gait_frequency[0] <= 0:
            raise ValueError("gait frequency must be positive")
        if not (0 < self.gait_duty[0] and self.gait_duty[1] < 1):
            raise ValueError("gait duty must lie in (0, 1)")
        if not (0 <= self.gait_offset[0] and self.gait_offset[1] < 1):
            raise ValueError("gait offset must lie in [0, 1)")


@dataclass
class Command:
    gait_frequency: np.ndarray
    gait_duty: np.ndarray
    gait_offset: np.ndarray
    vx_des: np.ndarray

    @property
    def batch(self) -> int:
        return self.vx_des.shape[0]

    def take(self, idx) -> "Command":
        return Command(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def assign(self, idx, other: "Command") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)


def sample_command(rng: np.random.Generator, ranges: CommandRanges | None = None, size: int = 1) -> Command:
    r = ranges or CommandRanges()
    return Command(
        gait_frequency=rng.uniform(*r.gait_frequency, size),
        gait_duty=rng.uniform(*r.gait_duty, size),
        gait_offset=rng.uniform(*r.gait_offset, size),
        vx_des=rng.uniform(*r.vx_des, size),
    )


def fixed_command(vx_des, size: int = 1, ranges: CommandRanges | None = None) -> Command:
    """Command with mid-range gait parameters and the given forward velocity."""
    r = ranges or CommandRanges()
    mid = lambda pair: np.full(size, 0.5 * (pair[0] + pair[1]))  # noqa: E731
    return Command(mid(r.gait_frequency), mid(r.gait_duty), mid(r.gait_offset),
                   np.broadcast_to(np.asarray(vx_des, dtype=float), (size,)).copy())


def command_features(cmd: Command, t) -> np.ndarray:
    """Network-facing command: left-leg clock (sin, cos), duty and forward velocity."""
    phase = 2 * np.pi * ((cmd.gait_frequency * np.asarray(t, dtype=float)) % 1.0)
    return np.column_stack([np.sin(phase), np.cos(phase), cmd.gait_duty, cmd.vx_des])


@dataclass(frozen=True)
class ObsScales:
    """Multiplicative normalization per channel; stored in checkpoints."""

    gravity: float = 1.0
    pitch_rate: float = 0.25
    joint_pos: float = 1.0
    joint_vel: float = 0.05
    prev_action: float = 1.0

    def vector(self) -> np.ndarray:
        return np.concatenate([np.full(_CHANNEL_WIDTH[c], getattr(self, c)) for c in OBS_CHANNELS])


@dataclass(frozen=True)
class NoiseScales:
    """Half-width of the uniform noise added to each normalized channel."""

    gravity: float = 0.01
    pitch_rate: float = 0.05
    joint_pos: float = 0.01
    joint_vel: float = 0.05
    prev_action: float = 0.0

    def vector(self) -> np.ndarray:
        return np.concatenate([np.full(_CHANNEL_WIDTH[c], getattr(self, c)) for c in OBS_CHANNELS])

    @classmethod
    def zero(cls) -> "NoiseScales":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def true_observation(state: RobotState, prev_action, nominal_joints, scales: ObsScales) -> np.ndarray:
    """Noise-free normalized proprioception (B, 15).

    Gravity is expressed in the body frame: with the torso pitched by theta
    its forward axis is (cos, sin) and up axis (-sin, cos) in the world.
    """
    th = state.base_pitch
    raw = np.column_stack([
        -np.sin(th), -np.cos(th),
        state.base_pitch_rate,
        state.joint_q - nominal_joints,
        state.joint_qdot,
        np.asarray(prev_action, dtype=float).reshape(state.batch, ACT_DIM),
    ])
    return raw * scales.vector()


class ObservationHistory:
    """Ring of produced frames (newest first) used to emulate sensing latency."""

    def __init__(self, batch: int, capacity: int = HISTORY_LEN, dim: int = OBS_DIM):
        self.frames = np.zeros((batch, capacity, dim))
        self.count = np.zeros(batch, dtype=int)

    @property
    def capacity(self) -> int:
        return self.frames.shape[1]

    def push(self, frame: np.ndarray) -> None:
        self.frames[:, 1:] = self.frames[:, :-1]
        self.frames[:, 0] = frame
        self.count = np.minimum(self.count + 1, self.capacity)

    def reset(self, idx, frame: np.ndarray) -> None:
        """Fill the ring of the selected robots with ``frame`` (no stale data)."""
        self.frames[idx] = np.asarray(frame)[:, None, :]
        self.count[idx] = self.capacity

    def delayed(self, latency) -> np.ndarray:
        latency = np.asarray(latency, dtype=int)
        if np.any(latency >= self.capacity) or np.any(latency < 0):
            raise ValueError("latency outside the history capacity")
        return self.frames[np.arange(self.frames.shape[0]), latency]


def observe(state: RobotState, prev_action, domain: DomainParams, noise_rng: np.random.Generator,
            history: ObservationHistory, *, nominal_joints, scales: ObsScales | None = None,
            noise: NoiseScales | None = None) -> np.ndarray:
    """Produce this step's noisy frame, store it, and return the delayed one."""
    scales = scales or ObsScales()
    noise = NoiseScales() if noise is None else noise
    frame = true_observation(state, prev_action, nominal_joints, scales)
    width = noise.vector()
    frame = frame + noise_rng.uniform(-1.0, 1.0, frame.shape) * width
    history.push(frame)
    return history.delayed(domain.latency_steps)


def assemble_privileged(state: RobotState, terrain, params: BodyParams) -> np.ndarray:
    """Ground truth (B, 24): velocity, height, foot heightmap, base heightmap.

    Heightmaps hold terrain heights relative to the point they surround (the
    terrain under each foot, or under the base).
    """
    kin = kinematics(state.q, params)
    feet_x = kin.points[:, list(FOOT_ROWS), 0]                       # (B, 2)
    foot_pts = feet_x[:, :, None] + FOOT_HMAP_OFFSETS                 # (B, 2, 5)
    foot_h, _ = terrain.height_slope(foot_pts)
    foot_ref, _ = terrain.height_slope(feet_x)
    foot_map = (foot_h - foot_ref[:, :, None]).reshape(state.batch, -1)
    base_pts = state.base_x[:, None] + BASE_HMAP_OFFSETS
    base_h, _ = terrain.height_slope(base_pts)
    base_ref, _ = terrain.height_slope(state.base_x)
    base_map = base_h - base_ref[:, None]
    out = np.column_stack([state.base_vx, state.base_vz, state.base_height, foot_map, base_map])
    assert out.shape[1] == PRIV_DIM
    return out


def estimation_target(privileged: np.ndarray) -> np.ndarray:
    """The explicitly-estimable prefix e_t of the privileged state."""
    return privileged[:, :EST_DIM]


assert PRIV_FOOT_HMAP.stop == EST_DIM and PRIV_BASE_HMAP.stop == PRIV_DIM
