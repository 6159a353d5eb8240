"""Planar 3-link arm pushing a square box on a table.

The arm moves in the horizontal plane (no gravity torque). Its end-effector
point is the single contact candidate; the box is a square sliding on a
frictional table. Contact with the box is a penalty spring-damper with
regularized Coulomb friction, which plays the role of the ground-truth
contact force. The virtual force of a contact model pushes the box along the
inward face normal and is cancelled on the arm side by the torque
decomposition ``tau = u + C_hat - Jc^T lambda_c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K

__all__ = [
    "ArmModel",
    "BoxModel",
    "WorldState",
    "ContactQuery",
    "StepInput",
    "Trajectory",
    "NonFiniteState",
    "mass_matrix",
    "bias_forces",
    "ee_kinematics",
    "signed_distance",
    "resolve_actual_contact",
    "step",
    "rollout",
]


class NonFiniteState(FloatingPointError):
    """Raised when the integrator produces a non-finite state."""

    def __init__(self, step_index: int, message: str = ""):
        self.step_index = step_index
        super().__init__(message or f"non-finite state at control step {step_index}")


def _triple(values, name):
    arr = tuple(float(v) for v in values)
    if len(arr) != 3:
        raise ValueError(f"{name} needs 3 entries, got {len(arr)}")
    return arr


@dataclass(frozen=True)
class ArmModel:
    link_lengths: tuple = (0.30, 0.30, 0.15)
    link_masses: tuple = (2.0, 1.5, 0.5)
    # None -> slender rods about their centre, m l^2 / 12
    link_inertias: Optional[tuple] = None
    joint_damping: tuple = (0.1, 0.1, 0.1)
    torque_limits: tuple = (20.0, 20.0, 20.0)
    ee_offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        lengths = _triple(self.link_lengths, "link_lengths")
        masses = _triple(self.link_masses, "link_masses")
        if self.link_inertias is None:
            inertias = tuple(m * l * l / 12.0 for m, l in zip(masses, lengths))
        else:
            inertias = _triple(self.link_inertias, "link_inertias")
        damping = _triple(self.joint_damping, "joint_damping")
        limits = _triple(self.torque_limits, "torque_limits")
        offset = tuple(float(v) for v in self.ee_offset)
        if len(offset) != 2:
            raise ValueError("ee_offset needs 2 entries")
        if min(lengths) <= 0 or min(masses) <= 0 or min(inertias) <= 0:
            raise ValueError("link lengths, masses and inertias must be positive")
        if min(limits) <= 0:
            raise ValueError("torque limits must be positive")
        if min(damping) < 0:
            raise ValueError("joint damping must be non-negative")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "link_masses", masses)
        object.__setattr__(self, "link_inertias", inertias)
        object.__setattr__(self, "joint_damping", damping)
        object.__setattr__(self, "torque_limits", limits)
        object.__setattr__(self, "ee_offset", offset)

    @cached_property
    def params(self) -> np.ndarray:
        return np.array(
            self.link_lengths
            + self.link_masses
            + self.link_inertias
            + self.joint_damping
            + self.torque_limits
            + self.ee_offset,
            dtype=np.float64,
        )

    @property
    def reach(self) -> float:
        return sum(self.link_lengths) + math.hypot(*self.ee_offset)


@dataclass(frozen=True)
class BoxModel:
    half_extent: float = 0.05
    mass: float = 0.5
    # None -> uniform square plate, m (2h)^2 / 6
    yaw_inertia: Optional[float] = None
    mu_table: float = 0.5
    mu_contact: float = 0.3
    # ground-truth contact law
    k_pen: float = 1.0e4
    d_pen: float = 100.0
    v_reg: float = 1.0e-3
    gravity: float = 9.81

    def __post_init__(self):
        if self.yaw_inertia is None:
            object.__setattr__(self, "yaw_inertia", self.mass * (2 * self.half_extent) ** 2 / 6.0)
        if self.half_extent <= 0 or self.mass <= 0 or self.yaw_inertia <= 0:
            raise ValueError("half_extent, mass and yaw_inertia must be positive")
        if self.mu_table < 0 or self.mu_contact < 0:
            raise ValueError("friction coefficients must be non-negative")
        if self.k_pen <= 0 or self.d_pen < 0 or self.v_reg <= 0:
            raise ValueError("invalid contact law parameters")

    @cached_property
    def params(self) -> np.ndarray:
        return np.array(
            [
                self.half_extent,
                self.mass,
                self.yaw_inertia,
                self.mu_table,
                self.mu_contact,
                self.k_pen,
                self.d_pen,
                self.v_reg,
                self.gravity,
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class WorldState:
    q: np.ndarray
    qdot: np.ndarray
    box_pose: np.ndarray
    box_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0

    def __post_init__(self):
        for name in ("q", "qdot", "box_pose", "box_vel"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != (3,):
                raise ValueError(f"{name} must have 3 entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def at_rest(cls, q, box_pose, t: float = 0.0) -> "WorldState":
        return cls(q=q, qdot=np.zeros(3), box_pose=box_pose, box_vel=np.zeros(3), t=t)

    @classmethod
    def from_vector(cls, x: np.ndarray, t: float) -> "WorldState":
        return cls(q=x[0:3], qdot=x[3:6], box_pose=x[6:9], box_vel=x[9:12], t=t)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot, self.box_pose, self.box_vel])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_vector())) and math.isfinite(self.t))


@dataclass(frozen=True)
class ContactQuery:
    phi: float
    normal: np.ndarray
    witness_ee: np.ndarray
    witness_box: np.ndarray


@dataclass(frozen=True)
class StepInput:
    u: np.ndarray
    gamma_virtual: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=np.float64))
        if self.gamma_virtual < 0:
            raise ValueError("gamma_virtual must be non-negative")


@dataclass(frozen=True)
class Checkpoint:
    records: np.ndarray
    states: np.ndarray


@dataclass
class Trajectory:
    """Per-control-step record of a rollout, sampled at the end of each step.

    ``f_actual`` / ``f_actual_n`` are the ground-truth contact force on the box
    (vector, and normal magnitude) during the last substep of the period.
    """

    initial: WorldState
    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    box_pose: np.ndarray
    box_vel: np.ndarray
    phi: np.ndarray
    gamma: np.ndarray
    f_actual_n: np.ndarray
    f_actual: np.ndarray
    ee_vel: np.ndarray
    u: np.ndarray
    k: Optional[np.ndarray] = None
    # raw simulator rows and per-step internal states; lets a later rollout
    # that shares the first controls resume instead of starting over
    checkpoint: Optional["Checkpoint"] = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def final_state(self) -> WorldState:
        return WorldState(self.q[-1], self.qdot[-1], self.box_pose[-1], self.box_vel[-1], self.t[-1])

    def state(self, l: int) -> WorldState:
        return WorldState(self.q[l], self.qdot[l], self.box_pose[l], self.box_vel[l], self.t[l])


def mass_matrix(model: ArmModel, q) -> np.ndarray:
    M = np.empty((3, 3))
    K.arm_dynamics(model.params, np.asarray(q, dtype=np.float64), np.zeros(3), M, np.empty(3))
    return M


def bias_forces(model: ArmModel, q, qdot) -> np.ndarray:
    """Coriolis/centrifugal torques plus joint viscous damping (no gravity in plane)."""
    C = np.empty(3)
    K.arm_dynamics(
        model.params,
        np.asarray(q, dtype=np.float64),
        np.asarray(qdot, dtype=np.float64),
        np.empty((3, 3)),
        C,
    )
    return C


def ee_kinematics(model: ArmModel, q, qdot):
    """Return (position, velocity, 2x3 Jacobian) of the end-effector contact point."""
    p = np.empty(2)
    v = np.empty(2)
    J = np.empty((2, 3))
    K.ee_kinematics(
        model.params, np.asarray(q, dtype=np.float64), np.asarray(qdot, dtype=np.float64), p, v, J
    )
    return p, v, J


def point_box_distance(box: BoxModel, box_pose, point) -> ContactQuery:
    out = np.empty(5)
    K.box_sdf(box.half_extent, box_pose[0], box_pose[1], box_pose[2], point[0], point[1], out)
    return ContactQuery(
        phi=float(out[0]),
        normal=out[1:3].copy(),
        witness_ee=np.array(point, dtype=np.float64),
        witness_box=out[3:5].copy(),
    )


def signed_distance(model: ArmModel, box: BoxModel, state: WorldState) -> ContactQuery:
    """Signed distance from the end-effector point to the box boundary (negative inside)."""
    p, _, _ = ee_kinematics(model, state.q, state.qdot)
    return point_box_distance(box, state.box_pose, p)


def resolve_actual_contact(box: BoxModel, query: ContactQuery, ee_vel) -> np.ndarray:
    """Ground-truth contact force on the box.

    ``ee_vel`` is the end-effector velocity relative to the box material point
    at the witness location. The normal part is a clamped spring-damper on the
    penetration depth; the tangential part is Coulomb friction regularized as
    ``mu * f_n * tanh(v_t / v_reg)``, dragging the box along with the slider.
    Inside :func:`step` the same law is evaluated at the end-of-substep
    tangential velocity for stability.
    """
    n = np.asarray(query.normal, dtype=np.float64)
    rel = np.asarray(ee_vel, dtype=np.float64)
    phidot = float(n @ rel)
    fn = K.contact_normal_force(box.params, query.phi, phidot)
    if fn == 0.0:
        return np.zeros(2)
    t = np.array([-n[1], n[0]])
    ft = box.mu_contact * fn * math.tanh(float(t @ rel) / box.v_reg)
    return -fn * n + ft * t


def step(
    model: ArmModel,
    box: BoxModel,
    state: WorldState,
    inp: StepInput,
    dt: float,
    compensate: bool = True,
) -> WorldState:
    """One semi-implicit Euler step of the coupled arm/box system.

    With ``compensate=False`` the bias term of the torque decomposition is
    dropped, which leaves a passive arm (used for energy checks).
    """
    if not (0.0 < dt <= 0.01):
        raise ValueError("dt must lie in (0, 0.01]")
    x = state.as_vector()
    info = np.empty(7)
    K.step_core(
        model.params,
        box.params,
        x,
        np.asarray(inp.u, dtype=np.float64),
        K.MODEL_CCCM,
        float(inp.gamma_virtual),
        0.0,
        float(dt),
        compensate,
        info,
        np.empty((3, 3)),
        np.empty((2, 3)),
        np.empty((9, 5)),
    )
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(0)
    return WorldState.from_vector(x, state.t + dt)


def substeps_per_control(t_c: float, dt: float) -> int:
    n = round(t_c / dt)
    if n < 1 or abs(n * dt - t_c) > 1e-9 * max(1.0, t_c):
        raise ValueError(f"t_c={t_c} is not an integer multiple of dt={dt}")
    return n


def rollout(
    model: ArmModel,
    box: BoxModel,
    initial: WorldState,
    controls: np.ndarray,
    t_c: float,
    dt: float,
    gamma: Optional[Sequence[float]] = None,
    stiffness: Optional[Sequence[float]] = None,
    curvature: float = 0.0,
    compensate: bool = True,
    resume: Optional[Trajectory] = None,
    start: int = 0,
) -> Trajectory:
    """Simulate ``len(controls)`` control periods with zero-order hold.

    Virtual force: ``gamma`` gives a fixed magnitude per control step (CCCM);
    ``stiffness`` gives per-step k of the exponential law with constant
    ``curvature`` c, re-evaluated from the distance at every substep. With
    neither, no virtual force is applied.

    With ``resume`` and ``start > 0`` the first ``start`` steps are taken
    from an earlier rollout, which the caller guarantees had the same
    initial state, settings and inputs for those steps. The result is then
    bit-identical to a rollout from scratch.
    """
    U = np.ascontiguousarray(controls, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] != 3:
        raise ValueError("controls must have shape (N, 3)")
    N = U.shape[0]
    substeps = substeps_per_control(t_c, dt)
    if gamma is not None and stiffness is not None:
        raise ValueError("give either gamma or stiffness, not both")
    if stiffness is not None:
        code = K.MODEL_VSCM
        k_arr = np.ascontiguousarray(stiffness, dtype=np.float64)
        g_arr = np.zeros(N)
    else:
        code = K.MODEL_CCCM
        g_arr = np.zeros(N) if gamma is None else np.ascontiguousarray(gamma, dtype=np.float64)
        k_arr = np.zeros(N)
    if g_arr.shape != (N,) or k_arr.shape != (N,):
        raise ValueError("force schedule length must match the number of controls")
    rec = np.empty((N, K.REC_SIZE))
    chk = np.empty((N + 1, K.CHK_SIZE))
    if start:
        if resume is None or resume.checkpoint is None or not 0 < start <= N:
            raise ValueError("resuming needs an earlier rollout with checkpoints and 0 < start <= N")
        if resume.checkpoint.records.shape != rec.shape:
            raise ValueError("the earlier rollout has a different number of steps")
        rec[:start] = resume.checkpoint.records[:start]
        chk[: start + 1] = resume.checkpoint.states[: start + 1]
    bad = K.rollout_core(
        model.params,
        box.params,
        initial.as_vector(),
        initial.t,
        U,
        code,
        g_arr,
        k_arr,
        float(curvature),
        substeps,
        float(dt),
        compensate,
        rec,
        chk,
        int(start),
    )
    if bad >= 0:
        raise NonFiniteState(int(bad))
    return Trajectory(
        initial=initial,
        t=rec[:, K.REC_T].copy(),
        q=rec[:, K.REC_Q : K.REC_Q + 3].copy(),
        qdot=rec[:, K.REC_QD : K.REC_QD + 3].copy(),
        box_pose=rec[:, K.REC_BOX : K.REC_BOX + 3].copy(),
        box_vel=rec[:, K.REC_BOXV : K.REC_BOXV + 3].copy(),
        phi=rec[:, K.REC_PHI].copy(),
        gamma=rec[:, K.REC_GAMMA].copy(),
        f_actual_n=rec[:, K.REC_FN].copy(),
        f_actual=rec[:, K.REC_F : K.REC_F + 2].copy(),
        ee_vel=rec[:, K.REC_EEV : K.REC_EEV + 2].copy(),
        u=np.clip(U, -np.asarray(model.torque_limits), np.asarray(model.torque_limits)),
        k=None if stiffness is None else k_arr.copy(),
        checkpoint=Checkpoint(rec, chk),
    )
