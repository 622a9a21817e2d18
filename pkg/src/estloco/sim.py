"""Planar point-foot biped.

Generalized coordinates are ``q = (x, z, pitch, hip_l, knee_l, hip_r, knee_r)``
where ``(x, z)`` is the hip point of the torso. Every body point is written as
``base + sum_a L[a] * u(phi_a)`` with ``u(phi) = (sin phi, -cos phi)`` and the
six segment angles ``phi = A @ q + offset`` (two torso axes, two thighs, two
shanks). Joint angles are relative: a thigh at zero hangs straight down from a
level torso and a negative knee folds the shank backwards.

All arrays carry a leading batch dimension so one call advances many
independent robots.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

GRAVITY = 9.81
NDOF = 7
NJOINT = 4
JOINT_NAMES = ("hip_l", "knee_l", "hip_r", "knee_r")

# Segment angles as linear maps of q: torso x-axis, torso z-axis, thigh_l,
# shank_l, thigh_r, shank_r.
ANGLE_MAP = np.array(
    [
        [0, 0, 1, 0, 0, 0, 0],
        [0, 0, 1, 0, 0, 0, 0],
        [0, 0, 1, 1, 0, 0, 0],
        [0, 0, 1, 1, 1, 0, 0],
        [0, 0, 1, 0, 0, 1, 0],
        [0, 0, 1, 0, 0, 1, 1],
    ],
    dtype=float,
)
ANGLE_OFFSET = np.array([np.pi / 2, np.pi, 0.0, 0.0, 0.0, 0.0])
# Angular-velocity map of the five rigid bodies (torso, thigh_l, shank_l,
# thigh_r, shank_r).
BODY_ANGLE_MAP = ANGLE_MAP[[0, 2, 3, 4, 5]]
NBODY = 5
FOOT_ROWS = (5, 6)


class SimulatorFault(RuntimeError):
    """Raised when the dynamics cannot be evaluated (singular mass matrix)."""


@dataclass(frozen=True)
class RobotModel:
    torso_mass: float = 10.0
    torso_inertia: float = 0.12
    # Torso centre of mass in the body frame, relative to the hip point.
    torso_com_x: float = 0.0
    torso_com_z: float = 0.10
    thigh_length: float = 0.35
    shank_length: float = 0.35
    thigh_mass: float = 1.0
    shank_mass: float = 1.0
    joint_lower: tuple = (-1.0, -2.3, -1.0, -2.3)
    joint_upper: tuple = (1.6, -0.05, 1.6, -0.05)
    torque_limits: tuple = (60.0, 60.0, 60.0, 60.0)
    kp: tuple = (80.0, 80.0, 80.0, 80.0)
    kd: tuple = (2.0, 2.0, 2.0, 2.0)
    nominal_base_height: float = 0.62
    gravity: float = GRAVITY

    def __post_init__(self):
        positive = ("torso_mass", "torso_inertia", "thigh_length", "shank_length",
                    "thigh_mass", "shank_mass", "nominal_base_height", "gravity")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("joint_lower", "joint_upper", "torque_limits", "kp", "kd"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != NJOINT:
                raise ValueError(f"{name} needs {NJOINT} entries")
            object.__setattr__(self, name, value)
        if min(self.kp) < 0 or min(self.kd) < 0:
            raise ValueError("PD gains must be nonnegative")
        if min(self.torque_limits) <= 0:
            raise ValueError("torque limits must be positive")
        if not self.nominal_base_height < self.thigh_length + self.shank_length:
            raise ValueError("nominal base height must be reachable with a bent knee")

    @property
    def total_mass(self) -> float:
        return self.torso_mass + 2 * (self.thigh_mass + self.shank_mass)

    @property
    def weight(self) -> float:
        """Total weight ``m g`` in newtons."""
        return self.gravity * self.total_mass

    def nominal_joint_pose(self) -> np.ndarray:
        """Crouch with both feet directly below the hip at the nominal height."""
        l1, l2, h = self.thigh_length, self.shank_length, self.nominal_base_height
        bend = np.arccos((h * h - l1 * l1 - l2 * l2) / (2 * l1 * l2))
        hip = np.arctan2(l2 * np.sin(bend), l1 + l2 * np.cos(bend))
        return np.array([hip, -bend, hip, -bend])


@dataclass(frozen=True)
class SimConfig:
    physics_dt: float = 0.001
    control_decimation: int = 10
    contact_stiffness: float = 30000.0
    contact_damping: float = 400.0
    # Stick-slip spring anchored at touchdown plus viscous damping; the
    # tangential force saturates at mu * N.
    tangential_stiffness: float = 20000.0
    tangential_damping: float = 300.0
    ground_friction: float = 1.0
    momentum_iterations: int = 8

    def __post_init__(self):
        if not self.physics_dt > 0 or self.control_decimation < 1:
            raise ValueError("physics_dt must be positive and decimation >= 1")
        if min(self.contact_stiffness, self.contact_damping, self.tangential_stiffness,
               self.tangential_damping) < 0:
            raise ValueError("contact coefficients must be nonnegative")

    @property
    def policy_dt(self) -> float:
        return self.physics_dt * self.control_decimation


@dataclass
class BodyParams:
    """Per-robot physical parameters after domain randomization."""

    mass: np.ndarray          # (B, 5)
    inertia: np.ndarray       # (B, 5)
    lever: np.ndarray         # (B, 7, 6) point-by-segment coefficients
    kp: np.ndarray            # (B, 4)
    kd: np.ndarray            # (B, 4)
    torque_limit: np.ndarray  # (B, 4)
    strength: np.ndarray      # (B,)
    friction: np.ndarray      # (B,) multiplier on terrain friction
    joint_lower: np.ndarray   # (4,)
    joint_upper: np.ndarray   # (4,)
    gravity: float

    @property
    def batch(self) -> int:
        return self.mass.shape[0]

    @property
    def total_mass(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    @property
    def weight(self) -> np.ndarray:
        return self.gravity * self.total_mass

    def take(self, idx) -> "BodyParams":
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in ("joint_lower", "joint_upper", "gravity"):
                out[f.name] = value
            else:
                out[f.name] = value[idx]
        return BodyParams(**out)

    def assign(self, idx, other: "BodyParams") -> None:
        for f in fields(self):
            if f.name in ("joint_lower", "joint_upper", "gravity"):
                continue
            getattr(self, f.name)[idx] = getattr(other, f.name)


def body_params(model: RobotModel, batch: int = 1, *, com_offset=0.0, payload=0.0,
                kp_factor=1.0, kd_factor=1.0, motor_strength=1.0,
                friction_rate=1.0) -> BodyParams:
    """Broadcast a model and (optional) randomization factors to a batch."""

    def col(v):
        return np.broadcast_to(np.asarray(v, dtype=float), (batch,)).copy()

    com_offset, payload = col(com_offset), col(payload)
    torso_mass = model.torso_mass + payload
    if np.any(torso_mass <= 0):
        raise ValueError("payload leaves a nonpositive torso mass")
    l1, l2 = model.thigh_length, model.shank_length
    mass = np.empty((batch, NBODY))
    mass[:, 0] = torso_mass
    mass[:, [1, 3]] = model.thigh_mass
    mass[:, [2, 4]] = model.shank_mass
    inertia = np.empty((batch, NBODY))
    inertia[:, 0] = model.torso_inertia * torso_mass / model.torso_mass
    inertia[:, [1, 3]] = model.thigh_mass * l1 * l1 / 12.0
    inertia[:, [2, 4]] = model.shank_mass * l2 * l2 / 12.0

    lever = np.zeros((batch, 7, 6))
    lever[:, 0, 0] = model.torso_com_x + com_offset
    lever[:, 0, 1] = model.torso_com_z
    for side, (thigh, shank) in enumerate(((2, 3), (4, 5))):
        com_row, shank_row, foot_row = 1 + 2 * side, 2 + 2 * side, 5 + side
        lever[:, com_row, thigh] = l1 / 2
        lever[:, shank_row, thigh] = l1
        lever[:, shank_row, shank] = l2 / 2
        lever[:, foot_row, thigh] = l1
        lever[:, foot_row, shank] = l2

    gains = np.ones((batch, NJOINT))
    return BodyParams(
        mass=mass,
        inertia=inertia,
        lever=lever,
        kp=gains * np.asarray(model.kp) * col(kp_factor)[:, None],
        kd=gains * np.asarray(model.kd) * col(kd_factor)[:, None],
        torque_limit=gains * np.asarray(model.torque_limits),
        strength=col(motor_strength),
        friction=col(friction_rate),
        joint_lower=np.asarray(model.joint_lower),
        joint_upper=np.asarray(model.joint_upper),
        gravity=model.gravity,
    )


@dataclass
class RobotState:
    base_x: np.ndarray
    base_z: np.ndarray
    base_pitch: np.ndarray
    base_vx: np.ndarray
    base_vz: np.ndarray
    base_pitch_rate: np.ndarray
    joint_q: np.ndarray         # (B, 4)
    joint_qdot: np.ndarray      # (B, 4)
    applied_torques: np.ndarray  # (B, 4)
    base_height: np.ndarray
    time: np.ndarray
    # Stick-slip anchor point of each foot (B, 2, 2); NaN while airborne.
    contact_anchor: np.ndarray | None = None

    def __post_init__(self):
        if self.contact_anchor is None:
            self.contact_anchor = np.full((self.base_x.shape[0], 2, 2), np.nan)

    @classmethod
    def from_generalized(cls, q, qd, terrain, torques=None, time=None, anchor=None) -> "RobotState":
        q = np.atleast_2d(np.asarray(q, dtype=float))
        qd = np.atleast_2d(np.asarray(qd, dtype=float))
        batch = q.shape[0]
        ground, _ = terrain.height_slope(q[:, 0])
        return cls(
            base_x=q[:, 0].copy(), base_z=q[:, 1].copy(), base_pitch=q[:, 2].copy(),
            base_vx=qd[:, 0].copy(), base_vz=qd[:, 1].copy(), base_pitch_rate=qd[:, 2].copy(),
            joint_q=q[:, 3:].copy(), joint_qdot=qd[:, 3:].copy(),
            applied_torques=np.zeros((batch, NJOINT)) if torques is None else np.array(torques, dtype=float),
            base_height=q[:, 1] - ground,
            time=np.zeros(batch) if time is None else np.broadcast_to(np.asarray(time, float), (batch,)).copy(),
            contact_anchor=None if anchor is None else np.array(anchor, dtype=float),
        )

    @property
    def q(self) -> np.ndarray:
        return np.column_stack([self.base_x, self.base_z, self.base_pitch, self.joint_q])

    @property
    def qd(self) -> np.ndarray:
        return np.column_stack([self.base_vx, self.base_vz, self.base_pitch_rate, self.joint_qdot])

    @property
    def batch(self) -> int:
        return self.base_x.shape[0]

    def take(self, idx) -> "RobotState":
        return RobotState(**{f.name: getattr(self, f.name)[idx].copy() for f in fields(self)})

    def assign(self, idx, other: "RobotState") -> None:
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def copy(self) -> "RobotState":
        return RobotState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def is_finite(self) -> np.ndarray:
        ok = np.ones(self.batch, dtype=bool)
        for f in fields(self):
            if f.name == "contact_anchor":
                continue
            value = getattr(self, f.name)
            ok &= np.isfinite(value.reshape(self.batch, -1)).all(axis=1)
        return ok


@dataclass
class FootState:
    position: np.ndarray   # (B, 2, 2) foot (l, r) x (x, z)
    velocity: np.ndarray   # (B, 2)  speed V
    force: np.ndarray      # (B, 2)  contact force magnitude F
    in_contact: np.ndarray  # (B, 2) bool


@dataclass
class StepInfo:
    foot_forces: np.ndarray   # (B, 2, 2) averaged over the control step
    torques: np.ndarray       # (B, 4) averaged over the control step
    terminated: np.ndarray    # (B,) bool
    reason: list = field(default_factory=list)


class Kinematics(NamedTuple):
    angles: np.ndarray    # (B, 6)
    unit: np.ndarray      # (B, 6, 2) u(phi)
    dunit: np.ndarray     # (B, 6, 2) du/dphi
    points: np.ndarray    # (B, 7, 2)
    jac: np.ndarray       # (B, 7, 2, 7)


_BODY_OUTER = np.einsum("ni,nj->nij", BODY_ANGLE_MAP, BODY_ANGLE_MAP).reshape(NBODY, -1)


def kinematics(q: np.ndarray, params: BodyParams) -> Kinematics:
    angles = q[:, 2:3] * ANGLE_MAP[:, 2][None, :] + q[:, 3:] @ ANGLE_MAP[:, 3:].T + ANGLE_OFFSET
    s, c = np.sin(angles), np.cos(angles)
    unit = np.stack([s, -c], axis=-1)
    dunit = np.stack([c, s], axis=-1)
    points = q[:, None, :2] + params.lever @ unit
    # J[b, p, d, j] = sum_a lever[b, p, a] * dunit[b, a, d] * A[a, j]
    scaled = params.lever[:, :, :, None] * dunit[:, None, :, :]
    jac = np.swapaxes(scaled, 2, 3) @ ANGLE_MAP
    jac[:, :, 0, 0] = 1.0
    jac[:, :, 1, 1] = 1.0
    return Kinematics(angles, unit, dunit, points, jac)


def mass_matrix(kin: Kinematics, params: BodyParams) -> np.ndarray:
    batch = params.mass.shape[0]
    weighted = kin.jac[:, :NBODY] * np.sqrt(params.mass)[:, :, None, None]
    flat = weighted.reshape(batch, 2 * NBODY, NDOF)
    m = np.swapaxes(flat, 1, 2) @ flat
    m += (params.inertia @ _BODY_OUTER).reshape(batch, NDOF, NDOF)
    return m


def gravity_force(kin: Kinematics, params: BodyParams) -> np.ndarray:
    return -params.gravity * (params.mass[:, None, :] @ kin.jac[:, :NBODY, 1, :])[:, 0]


def point_velocity(jac: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """Velocities (B, P, 2) of points with Jacobians (B, P, 2, 7)."""
    batch, npts = jac.shape[:2]
    return (jac.reshape(batch, 2 * npts, NDOF) @ qd[:, :, None]).reshape(batch, npts, 2)


def point_force(jac: np.ndarray, force: np.ndarray) -> np.ndarray:
    """Generalized force of point forces (B, P, 2) applied through ``jac``."""
    batch, npts = jac.shape[:2]
    return (force.reshape(batch, 1, 2 * npts) @ jac.reshape(batch, 2 * npts, NDOF))[:, 0]


def kinetic_gradient(kin: Kinematics, params: BodyParams, qd: np.ndarray) -> np.ndarray:
    """Partial derivative of the kinetic energy with respect to ``q`` at fixed ``qd``."""
    rates = qd @ ANGLE_MAP.T                                    # (B, 6)
    momenta = point_velocity(kin.jac[:, :NBODY], qd) * params.mass[:, :, None]
    # dv_n/dq_j = -sum_a L[n, a] u(phi_a) rate_a A[a, j]
    lever_mom = np.swapaxes(params.lever[:, :NBODY], 1, 2) @ momenta   # (B, 6, 2)
    weighted = np.sum(lever_mom * kin.unit, axis=-1) * rates
    return -weighted @ ANGLE_MAP


def bias_acceleration(kin: Kinematics, params: BodyParams, qd: np.ndarray) -> np.ndarray:
    """``J_dot @ qd`` for every tracked point, shape (B, 7, 2)."""
    rates = qd @ ANGLE_MAP.T
    return -(params.lever @ (kin.unit * (rates * rates)[:, :, None]))


def kinetic_energy(q, qd, params: BodyParams) -> np.ndarray:
    kin = kinematics(q, params)
    m = mass_matrix(kin, params)
    return 0.5 * np.sum(qd * (m @ qd[:, :, None])[:, :, 0], axis=1)


def potential_energy(q, params: BodyParams) -> np.ndarray:
    kin = kinematics(q, params)
    return params.gravity * np.einsum("bn,bn->b", params.mass, kin.points[:, :NBODY, 1])


def forward_dynamics(q, qd, torques, foot_forces, params: BodyParams, *, gravity=True,
                     free_dofs=None) -> np.ndarray:
    """Generalized accelerations of the floating chain.

    ``foot_forces`` has shape (B, 2, 2). When ``free_dofs`` is given the other
    coordinates are treated as rigidly locked (zero velocity and acceleration)
    and their accelerations are reported as zero.
    """
    q = np.atleast_2d(q)
    qd = np.atleast_2d(qd)
    kin = kinematics(q, params)
    m = mass_matrix(kin, params)
    bias = bias_acceleration(kin, params, qd)
    jb = kin.jac[:, :NBODY]
    rhs = -np.einsum("bn,bndj,bnd->bj", params.mass, jb, bias[:, :NBODY])
    if gravity:
        rhs += gravity_force(kin, params)
    rhs[:, 3:] += np.atleast_2d(torques)
    if foot_forces is not None:
        feet = kin.jac[:, list(FOOT_ROWS)]
        rhs += np.einsum("bfdj,bfd->bj", feet, np.asarray(foot_forces, dtype=float))
    if free_dofs is None:
        free = np.arange(NDOF)
    else:
        free = np.asarray(free_dofs)
    sub = m[:, free[:, None], free[None, :]]
    if np.any(np.abs(np.linalg.det(sub)) < 1e-14):
        raise SimulatorFault("mass matrix is numerically singular")
    acc = np.zeros_like(q)
    acc[:, free] = np.linalg.solve(sub, rhs[:, free][..., None])[..., 0]
    return acc


def contact_force(foot_pos, foot_vel, terrain, cfg: SimConfig, friction_rate=1.0, anchor=None,
                  return_anchor=False):
    """Penalty contact with Coulomb-clamped tangential friction.

    ``foot_pos`` and ``foot_vel`` have shape (..., 2). The normal force is
    ``k * depth + c * max(0, -v_n)``. The tangential force is a spring towards
    ``anchor`` plus viscous damping, clamped to ``mu * N``; without an anchor
    only the damping acts. Returns the world-frame force (..., 2) and, when
    requested, the updated anchor (NaN where the foot is airborne).
    """
    foot_pos = np.asarray(foot_pos, dtype=float)
    foot_vel = np.asarray(foot_vel, dtype=float)
    ground, slope = terrain.height_slope(foot_pos[..., 0])
    inv = 1.0 / np.sqrt(1.0 + slope * slope)
    normal = np.stack([-slope * inv, inv], axis=-1)
    tangent = np.stack([inv, slope * inv], axis=-1)
    depth = (ground - foot_pos[..., 1]) * inv
    touching = depth > 0
    vn = np.sum(foot_vel * normal, axis=-1)
    vt = np.sum(foot_vel * tangent, axis=-1)
    fn = cfg.contact_stiffness * depth + cfg.contact_damping * np.maximum(0.0, -vn)
    fn = np.where(touching, np.maximum(fn, 0.0), 0.0)
    mu = cfg.ground_friction * np.asarray(friction_rate, dtype=float) * terrain_friction(terrain, foot_pos)
    limit = mu * fn
    if anchor is None:
        anchor = foot_pos
    else:
        anchor = np.where(np.isnan(anchor), foot_pos, anchor)
    slip = np.sum((foot_pos - anchor) * tangent, axis=-1)
    trial = -cfg.tangential_stiffness * slip - cfg.tangential_damping * vt
    ft = np.clip(trial, -limit, limit)
    force = fn[..., None] * normal + ft[..., None] * tangent
    if not return_anchor:
        return force
    if cfg.tangential_stiffness > 0:
        # While sliding, drag the anchor so the spring carries the clamped force.
        sliding = np.abs(trial) > limit
        slip_new = np.where(sliding, -(ft + cfg.tangential_damping * vt) / cfg.tangential_stiffness, slip)
        slip_new = np.where(sliding & (np.sign(slip_new) != np.sign(slip)) & (slip != 0), 0.0, slip_new)
        new_anchor = foot_pos - slip_new[..., None] * tangent
    else:
        new_anchor = foot_pos
    new_anchor = np.where(touching[..., None], new_anchor, np.nan)
    return force, new_anchor


def terrain_friction(terrain, foot_pos):
    fr = getattr(terrain, "friction", 1.0)
    fr = np.asarray(fr, dtype=float)
    if fr.ndim == 1 and foot_pos.ndim == 3:
        return fr[:, None]
    return fr


def pd_torques(action, q_joint, qd_joint, params: BodyParams) -> np.ndarray:
    raw = params.kp * (action - q_joint) - params.kd * qd_joint
    raw = raw * params.strength[:, None]
    return np.clip(raw, -params.torque_limit, params.torque_limit)


def clamp_action(action, params: BodyParams) -> np.ndarray:
    return np.clip(action, params.joint_lower, params.joint_upper)


def generalized_momentum(q, qd, params: BodyParams, cfg: SimConfig) -> np.ndarray:
    """Momentum carried by the integrator between substeps.

    The variational update stores ``qd`` as the average velocity of the last
    substep, so its conjugate momentum is ``M(q - dt qd) qd``.
    """
    prev = q - cfg.physics_dt * qd
    kin = kinematics(prev, params)
    return (mass_matrix(kin, params) @ qd[:, :, None])[:, :, 0]


def momentum_map(q, qd, params: BodyParams, cfg: SimConfig) -> np.ndarray:
    """Linear (x, z) and angular momentum about the world origin, shape (B, 3)."""
    q = np.atleast_2d(q)
    p = generalized_momentum(q, np.atleast_2d(qd), params, cfg)
    angular = q[:, 0] * p[:, 1] - q[:, 1] * p[:, 0] + p[:, 2]
    return np.column_stack([p[:, 0], p[:, 1], angular])


def _substep(q, qd, p, anchor, action, params, terrain, cfg: SimConfig, gravity: bool,
             contacts: bool, torque_override=None):
    dt = cfg.physics_dt
    kin = kinematics(q, params)
    m = mass_matrix(kin, params)
    if torque_override is None:
        tau = pd_torques(action, q[:, 3:], qd[:, 3:], params)
    else:
        tau = torque_override
    force = np.zeros_like(p)
    force[:, 3:] = tau
    if gravity:
        force += gravity_force(kin, params)
    feet_f = np.zeros((q.shape[0], 2, 2))
    if contacts:
        feet_jac = kin.jac[:, 5:7]
        feet_vel = point_velocity(feet_jac, qd)
        feet_f, anchor = contact_force(kin.points[:, 5:7], feet_vel, terrain, cfg,
                                       params.friction[:, None], anchor=anchor, return_anchor=True)
        force += point_force(feet_jac, feet_f)
    try:
        minv = np.linalg.inv(m)
    except np.linalg.LinAlgError as exc:
        raise SimulatorFault("mass matrix is numerically singular") from exc
    base = p + dt * force
    # Symplectic Euler in momentum form: p' = p + dt (dT/dq(q, v) + Q), v = M(q)^-1 p'.
    new_p = base + dt * kinetic_gradient(kin, params, qd)
    v = (minv @ new_p[:, :, None])[:, :, 0]
    for _ in range(cfg.momentum_iterations):
        new_p = base + dt * kinetic_gradient(kin, params, v)
        v_next = (minv @ new_p[:, :, None])[:, :, 0]
        delta = np.max(np.abs(v_next - v)) if v.size else 0.0
        v = v_next
        if not delta > 1e-15 * (1.0 + np.max(np.abs(v))):
            break
    return q + dt * v, v, new_p, anchor, tau, feet_f


def step(state: RobotState, action, params: BodyParams, terrain, cfg: SimConfig, *,
         gravity: bool = True, contacts: bool = True, torque_override=None,
         limits: "TerminationLimits | None" = None):
    """Advance one policy period (``control_decimation`` physics substeps).

    ``action`` holds desired joint positions (B, 4); it is clamped to the joint
    limits before the PD loop. ``torque_override`` bypasses the PD controller.
    """
    action = clamp_action(np.atleast_2d(np.asarray(action, dtype=float)), params)
    q, qd = state.q, state.qd
    p = generalized_momentum(q, qd, params, cfg)
    anchor = state.contact_anchor.copy()
    force_sum = np.zeros((state.batch, 2, 2))
    tau_sum = np.zeros((state.batch, NJOINT))
    with np.errstate(all="ignore"):
        for _ in range(cfg.control_decimation):
            q, qd, p, anchor, tau, feet_f = _substep(q, qd, p, anchor, action, params, terrain,
                                                     cfg, gravity, contacts, torque_override)
            force_sum += feet_f
            tau_sum += tau
    n = cfg.control_decimation
    tau_avg = tau_sum / n
    new_state = RobotState.from_generalized(q, qd, terrain, torques=tau_avg,
                                            time=state.time + cfg.policy_dt, anchor=anchor)
    feet = foot_state(new_state, params, terrain, cfg, force_sum / n)
    reasons = termination_check(new_state, limits or TerminationLimits())
    terminated = np.array([r is not None for r in reasons])
    return new_state, feet, StepInfo(force_sum / n, tau_avg, terminated, reasons)


def foot_state(state: RobotState, params: BodyParams, terrain, cfg: SimConfig,
               forces=None) -> FootState:
    q, qd = state.q, state.qd
    with np.errstate(all="ignore"):
        kin = kinematics(q, params)
        feet_jac = kin.jac[:, list(FOOT_ROWS)]
        vel = np.einsum("bfdj,bj->bfd", feet_jac, qd)
        pos = kin.points[:, list(FOOT_ROWS)]
        if forces is None:
            forces = contact_force(pos, vel, terrain, cfg, params.friction[:, None])
        mag = np.linalg.norm(forces, axis=-1)
        ground, _ = terrain.height_slope(pos[..., 0])
    return FootState(position=pos, velocity=np.linalg.norm(vel, axis=-1), force=mag,
                     in_contact=pos[..., 1] < ground)


@dataclass(frozen=True)
class TerminationLimits:
    min_height: float = 0.4 * 0.62
    max_pitch: float = 1.0

    @classmethod
    def for_model_height(cls, model: RobotModel | None, fraction: float = 0.4,
                         max_pitch: float = 1.0) -> "TerminationLimits":
        height = RobotModel().nominal_base_height if model is None else model.nominal_base_height
        return cls(min_height=fraction * height, max_pitch=max_pitch)


def termination_check(state: RobotState, limits: TerminationLimits) -> list:
    """Per-robot termination reason: ``"nonfinite"``, ``"height"``, ``"pitch"`` or None."""
    finite = state.is_finite()
    out = []
    for i in range(state.batch):
        if not finite[i]:
            out.append("nonfinite")
        elif state.base_height[i] < limits.min_height:
            out.append("height")
        elif abs(state.base_pitch[i]) > limits.max_pitch:
            out.append("pitch")
        else:
            out.append(None)
    return out


def standing_state(model: RobotModel, terrain, batch: int = 1, *, x=0.0, stance=0.08,
                   params: BodyParams | None = None, cfg: SimConfig | None = None) -> RobotState:
    """Crouched pose with the feet split by ``2 * stance`` and resting on the ground."""
    joints = model.nominal_joint_pose()
    # Rotating a leg about the hip with the knee fixed swings the foot on a
    # circle of radius equal to the nominal height.
    stance = np.broadcast_to(np.asarray(stance, dtype=float), (batch,))
    split = np.arcsin(np.clip(stance / model.nominal_base_height, -1.0, 1.0))
    q = np.zeros((batch, NDOF))
    q[:, 0] = x
    q[:, 3:] = joints + split[:, None] * np.array([1.0, 0.0, -1.0, 0.0])
    params = params or body_params(model, batch)
    cfg = cfg or SimConfig()
    kin = kinematics(q, params)
    feet = kin.points[:, list(FOOT_ROWS)]
    ground, _ = terrain.height_slope(feet[..., 0])
    # Rest the lowest foot on the surface, sunk to the static load depth.
    sink = params.weight / (2 * cfg.contact_stiffness) if cfg.contact_stiffness > 0 else 0.0
    q[:, 1] = np.max(ground - feet[..., 1], axis=1) - sink
    return RobotState.from_generalized(q, np.zeros_like(q), terrain)


def with_generalized(state: RobotState, q=None, qd=None, terrain=None) -> RobotState:
    new = replace(state)
    if q is not None:
        new.base_x, new.base_z, new.base_pitch = q[:, 0].copy(), q[:, 1].copy(), q[:, 2].copy()
        new.joint_q = q[:, 3:].copy()
    if qd is not None:
        new.base_vx, new.base_vz, new.base_pitch_rate = qd[:, 0].copy(), qd[:, 1].copy(), qd[:, 2].copy()
        new.joint_qdot = qd[:, 3:].copy()
    if terrain is not None:
        ground, _ = terrain.height_slope(new.base_x)
        new.base_height = new.base_z - ground
    return new
