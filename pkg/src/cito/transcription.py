"""Single-shooting transcription of the pushing task.

A decision vector is mapped to a rollout, and the rollout to the normalized
task cost (final box pose error plus integrated end-effector speed and
virtual-force terms), the CCCM slack penalty, and for CCCM the constraint
vector.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .contact_models import (
    ContactModelSpec,
    DecisionSchema,
    ModelVariant,
    SchemaMismatch,
    decision_schema,
)
from .planar_dynamics import ArmModel, BoxModel, NonFiniteState, Trajectory, WorldState, rollout

BLOWUP_PENALTY = 1.0e10


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class CostWeights:
    w1: float
    w2: float
    w3: float
    w4: float
    w5: float = 0.0
    t_c: float = 0.05
    N: int = 20

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3, self.w4, self.w5) < 0:
            raise ValueError("weights must be non-negative")
        if self.t_c <= 0 or self.N < 1:
            raise ValueError("t_c must be positive and N >= 1")

    @classmethod
    def defaults(cls, variant, t_c: float = 0.05, N: int = 20) -> "CostWeights":
        if ModelVariant(variant) is ModelVariant.CCCM:
            return cls(1e4, 1e4, 0.2, 0.2, 1e3, t_c, N)
        return cls(1e3, 1e3, 0.2, 0.02, 0.0, t_c, N)


@dataclass(frozen=True)
class TaskGoal:
    target_pos: np.ndarray
    target_yaw: float
    initial_pos_error_norm: float

    def __post_init__(self):
        object.__setattr__(self, "target_pos", np.asarray(self.target_pos, dtype=np.float64))
        if not self.initial_pos_error_norm > 0:
            raise ValueError("initial position error must be positive")

    @classmethod
    def from_initial(cls, initial_box_pose, target_pos, target_yaw: float) -> "TaskGoal":
        err = np.asarray(initial_box_pose[:2], dtype=np.float64) - np.asarray(target_pos, dtype=np.float64)
        return cls(np.asarray(target_pos, dtype=np.float64), float(target_yaw), float(np.linalg.norm(err)))


@dataclass(frozen=True)
class ObjectiveBreakdown:
    c_final: float
    c_integrated: float
    c_slack: float
    total: float
    blowup: bool = False

    @classmethod
    def penalty(cls) -> "ObjectiveBreakdown":
        return cls(math.nan, math.nan, math.nan, BLOWUP_PENALTY, True)

    def as_dict(self) -> dict:
        return dict(
            c_final=self.c_final,
            c_integrated=self.c_integrated,
            c_slack=self.c_slack,
            total=self.total,
            blowup=self.blowup,
        )


def final_cost(weights: CostWeights, goal: TaskGoal, final_state: WorldState) -> float:
    p_err = (np.asarray(final_state.box_pose[:2]) - goal.target_pos) / goal.initial_pos_error_norm
    yaw_err = wrap_angle(final_state.box_pose[2] - goal.target_yaw)
    return float(weights.w1 * (p_err @ p_err) + weights.w2 * yaw_err * yaw_err)


def integrated_cost(weights: CostWeights, trajectory: Trajectory) -> float:
    if len(trajectory) != weights.N:
        raise ValueError(f"trajectory has {len(trajectory)} records, expected {weights.N}")
    v2 = np.sum(trajectory.ee_vel**2, axis=1)
    g2 = trajectory.gamma**2
    return float(weights.t_c / weights.N * np.sum(weights.w3 * v2 + weights.w4 * g2))


@dataclass(frozen=True)
class SimContext:
    arm: ArmModel
    box: BoxModel
    initial: WorldState
    t_c: float = 0.05
    N: int = 20
    dt: float = 1e-3


@dataclass
class Evaluation:
    objective: ObjectiveBreakdown
    constraints: Optional[np.ndarray]
    trajectory: Optional[Trajectory]


def simulate_decision(
    spec: ContactModelSpec, schema: DecisionSchema, decision, ctx: SimContext, resume=None, start: int = 0
) -> Trajectory:
    """Roll out a decision vector with the model's virtual-force schedule.

    ``resume``/``start`` are passed on to :func:`rollout`.
    """
    if schema.variant is not spec.variant:
        raise SchemaMismatch("schema was built for a different contact model")
    parts = schema.split(decision)
    common = dict(resume=resume, start=start)
    if spec.variant is ModelVariant.CCCM:
        return rollout(ctx.arm, ctx.box, ctx.initial, parts["u"], ctx.t_c, ctx.dt, gamma=parts["gamma"], **common)
    if spec.variant is ModelVariant.SCM:
        k = np.full(schema.n_steps, spec.k)
    else:
        k = parts["k"]
    return rollout(
        ctx.arm, ctx.box, ctx.initial, parts["u"], ctx.t_c, ctx.dt, stiffness=k, curvature=spec.c, **common
    )


def first_affected_steps(schema: DecisionSchema) -> np.ndarray:
    """For every decision entry, the first control step whose simulation it changes.

    Slack variables never enter the simulation and map to ``n_steps``.
    """
    out = np.full(schema.size, schema.n_steps, dtype=np.int64)
    for b in schema.blocks:
        if b.name == "s":
            continue
        width = b.length // schema.n_steps
        out[b.slice] = np.arange(b.length) // width
    return out


def constraint_vector(trajectory: Trajectory, gamma, s) -> np.ndarray:
    """Interleaved per step: ``[phi_0, g0*phi_0 - s_0, phi_1, ...]``."""
    out = np.empty(2 * len(trajectory))
    out[0::2] = trajectory.phi
    out[1::2] = np.asarray(gamma) * trajectory.phi - np.asarray(s)
    return out


def _evaluate(spec, weights, goal, schema, decision, ctx, resume=None, start: int = 0) -> Evaluation:
    parts = schema.split(decision)
    try:
        traj = simulate_decision(spec, schema, decision, ctx, resume, start)
    except NonFiniteState:
        cons = None
        if spec.variant is ModelVariant.CCCM:
            cons = np.tile([-BLOWUP_PENALTY, BLOWUP_PENALTY], schema.n_steps)
        return Evaluation(ObjectiveBreakdown.penalty(), cons, None)
    cf = final_cost(weights, goal, traj.final_state)
    ci = integrated_cost(weights, traj)
    cons = None
    if spec.variant is ModelVariant.CCCM:
        cs = float(weights.w5 * np.sum(parts["s"] ** 2))
        cons = constraint_vector(traj, parts["gamma"], parts["s"])
    else:
        cs = 0.0
    total = cf + ci + cs
    if not math.isfinite(total) or total >= BLOWUP_PENALTY:
        return Evaluation(replace(ObjectiveBreakdown.penalty(), c_final=cf, c_integrated=ci, c_slack=cs), cons, traj)
    return Evaluation(ObjectiveBreakdown(cf, ci, cs, total), cons, traj)


def evaluate_objective(spec, weights, goal, decision, ctx: SimContext, schema=None) -> ObjectiveBreakdown:
    schema = schema or decision_schema(spec, ctx.N, 3, min(ctx.arm.torque_limits))
    return _evaluate(spec, weights, goal, schema, decision, ctx).objective


def evaluate_constraints(spec, decision, ctx: SimContext, schema=None) -> np.ndarray:
    if ContactModelSpec(spec.variant).variant is not ModelVariant.CCCM:
        raise SchemaMismatch("constraints exist only for the CCCM")
    schema = schema or decision_schema(spec, ctx.N, 3, min(ctx.arm.torque_limits))
    parts = schema.split(decision)
    traj = simulate_decision(spec, schema, decision, ctx)
    return constraint_vector(traj, parts["gamma"], parts["s"])


class PushingProblem:
    """Objective and constraints of one scenario with a small evaluation cache.

    Objective and constraint calls at the same decision vector share one
    rollout. Constraints for the solver are returned in ``g(x) <= 0`` form.

    The last decision that moved more than one entry is kept as a base. A
    decision that differs from it in a single entry, as finite-difference
    probes do, resumes the base rollout at the first step that entry
    touches. Results are bit-identical to full rollouts.
    """

    def __init__(self, spec: ContactModelSpec, weights: CostWeights, goal: TaskGoal, ctx: SimContext, cache_size: int = 4):
        self.spec = spec
        self.weights = weights
        self.goal = goal
        self.ctx = ctx
        self.schema = decision_schema(spec, ctx.N, 3, min(ctx.arm.torque_limits))
        self.n_evals = 0
        self._cache: "OrderedDict[bytes, Evaluation]" = OrderedDict()
        self._cache_size = cache_size
        self._first_step = first_affected_steps(self.schema)
        self._base: Optional[Tuple[np.ndarray, Trajectory]] = None
        self._lock = threading.Lock()

    @property
    def constrained(self) -> bool:
        return self.spec.variant is ModelVariant.CCCM

    def evaluate(self, x) -> Evaluation:
        x = np.ascontiguousarray(x, dtype=np.float64)
        key = x.tobytes()
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
            self.n_evals += 1
            base = self._base
        resume, start, changed = None, 0, x.size
        if base is not None:
            diff = np.flatnonzero(x != base[0])
            changed = diff.size
            start = int(self._first_step[diff].min()) if diff.size else self.schema.n_steps
            if start > 0:
                resume = base[1]
            else:
                start = 0
        ev = _evaluate(self.spec, self.weights, self.goal, self.schema, x, self.ctx, resume, start)
        with self._lock:
            self._cache[key] = ev
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
            if changed > 1 and ev.trajectory is not None:
                self._base = (x.copy(), ev.trajectory)
        return ev

    def objective(self, x) -> float:
        return self.evaluate(x).objective.total

    def constraints(self, x) -> np.ndarray:
        """``g(x) <= 0``: ``[-phi_0, g0*phi_0 - s_0, ...]``."""
        cons = self.evaluate(x).constraints
        if cons is None:
            raise SchemaMismatch("constraints exist only for the CCCM")
        g = cons.copy()
        g[0::2] *= -1.0
        return g

    def trajectory(self, x) -> Trajectory:
        ev = self.evaluate(x)
        if ev.trajectory is None:
            raise NonFiniteState(-1, "decision vector drives the simulation to a non-finite state")
        return ev.trajectory
