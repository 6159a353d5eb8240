"""Pushing scenarios, metrics, model-comparison sweeps and result files.

A cell of the comparison grid is one contact model at one initial
end-effector/box distance. Each cell is solved from the zero-torque guess,
the solution is replayed through the simulator, and the metrics are computed
from that replay. Cell outputs::

    report.json        config echo, solver summary, metrics (with wall time)
    decision.json      config echo, decision vector and solver status
    trajectory.csv     per-step states and forces of the replay
    solve_trace.csv    one row per inner iteration
    k_trajectory.csv   VSCM only: step index and stiffness

A sweep adds ``metrics.csv`` (deterministic columns only), ``timings.csv``
(wall-clock data) and ``k_trajectories.csv`` at the top of the output tree.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import multiprocessing
import os
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .contact_models import ContactModelSpec, ModelVariant, decision_schema
from .nlp_solver import SolveResult, SolverOptions, Status, solve_augmented_lagrangian, solve_box_qn
from .planar_dynamics import (
    ArmModel,
    BoxModel,
    NonFiniteState,
    Trajectory,
    WorldState,
    ee_kinematics,
    signed_distance,
)
from .transcription import CostWeights, PushingProblem, SimContext, TaskGoal, simulate_decision, wrap_angle

log = logging.getLogger(__name__)

DEFAULT_BOX_POSE = (0.45, 0.20, 0.0)
DEFAULT_DISTANCES = (0.11, 0.17, 0.30)
MODEL_ORDER = tuple(v.value for v in ModelVariant)
FAILED = "Failed"

IK_TOL = 1e-6
IK_MAX_ITERS = 200
IK_DAMPING = 1e-3


class UnreachableDistance(ValueError):
    """The requested initial distance cannot be realized by the arm."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One pushing task: contact model, initial distance and all settings.

    ``weights=None`` selects the model's default weights. ``seed`` is kept
    for file compatibility; the pipeline draws no random numbers.
    """

    model: ContactModelSpec
    initial_distance: float
    goal_displacement: float = 0.25
    horizon: float = 1.0
    t_c: float = 0.05
    dt: float = 1e-3
    box_pose: tuple = DEFAULT_BOX_POSE
    seed: int = 0
    weights: Optional[CostWeights] = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    arm: ArmModel = field(default_factory=ArmModel)
    box: BoxModel = field(default_factory=BoxModel)

    def __post_init__(self):
        if not isinstance(self.model, ContactModelSpec):
            object.__setattr__(self, "model", ContactModelSpec(self.model))
        if not self.initial_distance > 0:
            raise ValueError("initial_distance must be positive")
        if self.t_c <= 0 or self.horizon <= 0:
            raise ValueError("horizon and t_c must be positive")
        n = round(self.horizon / self.t_c)
        if n < 1 or abs(n * self.t_c - self.horizon) > 1e-9 * self.horizon:
            raise ValueError(f"horizon {self.horizon} is not a whole number of control periods {self.t_c}")
        pose = tuple(float(v) for v in self.box_pose)
        if len(pose) != 3:
            raise ValueError("box_pose needs (x, y, yaw)")
        object.__setattr__(self, "box_pose", pose)
        if self.weights is None:
            weights = CostWeights.defaults(self.model.variant, self.t_c, n)
            if self.model.variant is ModelVariant.CCCM:
                weights = dataclasses.replace(weights, w5=self.model.slack_weight)
            object.__setattr__(self, "weights", weights)
        elif self.weights.N != n or self.weights.t_c != self.t_c:
            raise ValueError("cost weights were built for a different horizon")

    @property
    def N(self) -> int:
        return round(self.horizon / self.t_c)

    @property
    def variant(self) -> ModelVariant:
        return self.model.variant

    @property
    def name(self) -> str:
        return f"{self.variant.value}_phi{self.initial_distance:.3f}"

    def as_dict(self) -> Dict[str, Any]:
        def plain(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, ModelVariant):
                return obj.value
            if isinstance(obj, (tuple, list)):
                return [plain(v) for v in obj]
            return obj

        return plain(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenarioConfig":
        def tuples(d):
            return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}

        rest = {k: v for k, v in data.items() if k not in ("model", "weights", "solver", "arm", "box")}
        return cls(
            ContactModelSpec(**data["model"]),
            weights=CostWeights(**data["weights"]),
            solver=SolverOptions(**data["solver"]),
            arm=ArmModel(**tuples(data["arm"])),
            box=BoxModel(**data["box"]),
            **tuples(rest),
        )


@dataclass(frozen=True)
class SweepConfig:
    cells: tuple
    workers: int = 1


@dataclass(frozen=True)
class MetricsRow:
    model: str
    phi0: float
    physical_inaccuracy: float
    final_position_error: float
    final_orientation_error: float
    wall_time: float
    status: str

    # wall_time is not reproducible, so metrics.csv leaves it out
    CSV_FIELDS = ("model", "phi0", "physical_inaccuracy", "final_position_error", "final_orientation_error", "status")

    def __post_init__(self):
        for name in ("physical_inaccuracy", "final_position_error", "final_orientation_error"):
            v = getattr(self, name)
            if v < 0:
                raise ValueError(f"{name} must be non-negative")

    def sort_key(self):
        order = MODEL_ORDER.index(self.model) if self.model in MODEL_ORDER else len(MODEL_ORDER)
        return (order, self.model, self.phi0)

    def same_result(self, other: "MetricsRow") -> bool:
        """Equality of everything except wall time (NaN equals NaN)."""
        for name in self.CSV_FIELDS:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
                continue
            if a != b:
                return False
        return True


@dataclass
class SolveReport:
    config: ScenarioConfig
    result: SolveResult
    metrics: MetricsRow
    error: Optional[str] = None

    def as_dict(self) -> Dict[str, Any]:
        r = self.result
        return dict(
            config=self.config.as_dict(),
            solver=dict(
                status=r.status.value if isinstance(r.status, Status) else str(r.status),
                objective=r.fun,
                inner_iterations=r.inner_iters,
                outer_iterations=r.outer_iters,
                evaluations=r.n_fev,
                wall_time=r.wall_time,
                max_violation=r.max_violation,
                projected_gradient=r.pg_norm,
            ),
            metrics=dataclasses.asdict(self.metrics),
            error=self.error,
        )


# metrics ---------------------------------------------------------------------------


def physical_inaccuracy(trajectory: Trajectory, t_c: float) -> float:
    """Impulse of the virtual force applied while the arm is away from the box."""
    gamma = np.asarray(trajectory.gamma, dtype=np.float64)
    phi = np.asarray(trajectory.phi, dtype=np.float64)
    return float(t_c * np.sum(np.where(phi > 0.0, gamma, 0.0)))


def final_errors(trajectory: Trajectory, goal: TaskGoal) -> Tuple[float, float]:
    pose = trajectory.box_pose[-1]
    pos = float(np.linalg.norm(pose[:2] - goal.target_pos))
    yaw = abs(wrap_angle(float(pose[2]) - goal.target_yaw))
    return pos, yaw


def goal_for(config: ScenarioConfig) -> TaskGoal:
    """Push along +x by ``goal_displacement`` without turning the box."""
    bx, by, yaw = config.box_pose
    return TaskGoal.from_initial(config.box_pose, (bx + config.goal_displacement, by), yaw)


def metrics_for(config: ScenarioConfig, trajectory: Trajectory, status: str, wall_time: float = 0.0) -> MetricsRow:
    pos, yaw = final_errors(trajectory, goal_for(config))
    return MetricsRow(
        config.variant.value,
        float(config.initial_distance),
        physical_inaccuracy(trajectory, config.t_c),
        pos,
        yaw,
        float(wall_time),
        status,
    )


# initial configuration -------------------------------------------------------------


def _ik_residual(arm: ArmModel, q, target, heading):
    p, _, J = ee_kinematics(arm, q, np.zeros(3))
    r = np.array([p[0] - target[0], p[1] - target[1], q.sum() - heading])
    A = np.vstack([J, np.ones(3)])
    return r, A


def _elbow_up_seed(arm: ArmModel, target, heading) -> np.ndarray:
    l1, l2, l3 = arm.link_lengths
    # wrist position with the last link pointing along the heading
    wx = target[0] - l3 * math.cos(heading)
    wy = target[1] - l3 * math.sin(heading)
    d2 = wx * wx + wy * wy
    c2 = np.clip((d2 - l1 * l1 - l2 * l2) / (2 * l1 * l2), -1.0, 1.0)
    q2 = -math.acos(c2)
    q1 = math.atan2(wy, wx) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
    return np.array([q1, q2, heading - q1 - q2])


def build_initial_state(config: ScenarioConfig) -> WorldState:
    """Arm at rest with its contact point ``initial_distance`` in front of the box.

    The point sits on the outward normal of the box face that looks along
    ``-x`` in the box frame, level with the face centre, and the last link
    points at the box. The elbow-up branch is seeded in closed form and
    polished with damped least squares.
    """
    arm = config.arm
    bx, by, yaw = config.box_pose
    reach = config.box.half_extent + config.initial_distance
    target = np.array([bx - reach * math.cos(yaw), by - reach * math.sin(yaw)])
    heading = yaw
    q = _elbow_up_seed(arm, target, heading)
    lam2 = IK_DAMPING**2
    for _ in range(IK_MAX_ITERS):
        r, A = _ik_residual(arm, q, target, heading)
        if np.max(np.abs(r)) < 1e-13:
            break
        q = q - A.T @ np.linalg.solve(A @ A.T + lam2 * np.eye(3), r)
    r, _ = _ik_residual(arm, q, target, heading)
    if not np.all(np.isfinite(q)) or float(np.linalg.norm(r[:2])) > IK_TOL or abs(r[2]) > IK_TOL:
        raise UnreachableDistance(
            f"initial distance {config.initial_distance} m is outside the arm workspace "
            f"(IK residual {float(np.linalg.norm(r[:2])):.3g} m)"
        )
    state = WorldState.at_rest(q, np.array(config.box_pose))
    phi = signed_distance(arm, config.box, state).phi
    if abs(phi - config.initial_distance) > IK_TOL:
        raise UnreachableDistance(
            f"closest box feature is {phi:.6f} m away, not {config.initial_distance} m; the arm links "
            "or box placement interfere"
        )
    return state


# solving ---------------------------------------------------------------------------


def make_problem(config: ScenarioConfig, initial: Optional[WorldState] = None) -> PushingProblem:
    initial = build_initial_state(config) if initial is None else initial
    ctx = SimContext(config.arm, config.box, initial, config.t_c, config.N, config.dt)
    return PushingProblem(config.model, config.weights, goal_for(config), ctx)


def solve(config: ScenarioConfig, problem: PushingProblem) -> SolveResult:
    schema = problem.schema
    x0 = schema.initial()
    lo, hi = schema.lower(), schema.upper()
    if problem.constrained:
        return solve_augmented_lagrangian(problem.objective, problem.constraints, x0, lo, hi, config.solver)
    return solve_box_qn(problem.objective, x0, lo, hi, config.solver)


def run_scenario(config: ScenarioConfig, out_dir=None) -> Tuple[SolveReport, Trajectory]:
    """Solve one cell from the zero-torque guess and replay the result.

    Solver and simulator errors end up in the status; the returned
    trajectory is the replay of the best decision found (the initial guess
    if the solver could not start).
    """
    problem = make_problem(config)
    x0 = problem.schema.initial()
    error = None
    try:
        result = solve(config, problem)
    except (FloatingPointError, ArithmeticError) as exc:
        error = f"{type(exc).__name__}: {exc}"
        log.warning("%s: solver stopped: %s", config.name, error)
        result = SolveResult(x=x0, fun=problem.objective(x0), status=Status.NUMERICAL_FAILURE)
    try:
        trajectory = problem.trajectory(result.x)
    except NonFiniteState as exc:
        error = f"replay of the returned decision diverged: {exc}"
        result = dataclasses.replace(result, x=x0, status=Status.NUMERICAL_FAILURE)
        trajectory = problem.trajectory(x0)
    metrics = metrics_for(config, trajectory, result.status.value, result.wall_time)
    report = SolveReport(config, result, metrics, error)
    if out_dir is not None:
        write_cell(Path(out_dir), report, trajectory)
    return report, trajectory


def replay_decision(record: Dict[str, Any]) -> Tuple[ScenarioConfig, MetricsRow, Trajectory]:
    """Re-simulate a decision record written by :func:`run_scenario`."""
    config = ScenarioConfig.from_dict(record["config"])
    problem = make_problem(config)
    x = np.array(record["decision"], dtype=np.float64)
    trajectory = simulate_decision(config.model, problem.schema, x, problem.ctx)
    metrics = metrics_for(config, trajectory, record["status"])
    return config, metrics, trajectory


def replay_file(path, out_dir=None) -> Tuple[ScenarioConfig, MetricsRow, Trajectory]:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    config, metrics, trajectory = replay_decision(record)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "trajectory.csv", trajectory_csv(trajectory, config.variant is ModelVariant.VSCM))
        atomic_write(out / "metrics.csv", metrics_csv([metrics]))
    return config, metrics, trajectory


# sweeps ----------------------------------------------------------------------------


def _cell(args) -> Tuple[MetricsRow, Optional[str], Optional[List[float]]]:
    config, out_dir = args
    try:
        report, trajectory = run_scenario(config, Path(out_dir) / config.name if out_dir else None)
    except Exception as exc:  # one broken cell must not sink the sweep
        log.error("%s failed: %s", config.name, exc)
        nan = math.nan
        row = MetricsRow(config.variant.value, float(config.initial_distance), nan, nan, nan, 0.0, FAILED)
        return row, "".join(traceback.format_exception_only(type(exc), exc)).strip(), None
    k = None if trajectory.k is None or config.variant is not ModelVariant.VSCM else trajectory.k.tolist()
    return report.metrics, report.error, k


def compare_models(configs: Sequence[ScenarioConfig], out_dir=None, workers: int = 1) -> List[MetricsRow]:
    """Run every cell and return the rows sorted by model then distance.

    Cells are independent and run in separate processes when ``workers > 1``.
    """
    if not configs:
        raise ValueError("need at least one scenario")
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ValueError("duplicate (model, distance) cells in the sweep")
    jobs = [(c, None if out_dir is None else str(out_dir)) for c in configs]
    if workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=ctx) as pool:
            outcomes = list(pool.map(_cell, jobs))
    else:
        outcomes = [_cell(j) for j in jobs]
    ranked = sorted(zip(configs, outcomes), key=lambda co: co[1][0].sort_key())
    rows = [o[0] for _, o in ranked]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "metrics.csv", metrics_csv(rows))
        atomic_write(out / "timings.csv", timings_csv(rows))
        k_rows = [(c, o[2]) for c, o in ranked if o[2] is not None]
        atomic_write(out / "k_trajectories.csv", k_trajectories_csv(k_rows))
        errors = {c.name: o[1] for c, o in ranked if o[1]}
        if errors:
            atomic_write(out / "errors.json", json.dumps(errors, indent=2, sort_keys=True) + "\n")
    return rows


def cell_failed(row: MetricsRow) -> bool:
    return row.status == FAILED


# files -----------------------------------------------------------------------------


def atomic_write(path: Path, text: str) -> None:
    """Write-then-rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


TRAJECTORY_COLUMNS = (
    "step", "t", "q1", "q2", "q3", "qd1", "qd2", "qd3", "box_x", "box_y", "box_yaw",
    "phi", "gamma_virtual", "f_actual_n", "u1", "u2", "u3",
)  # fmt: skip


def trajectory_csv(trajectory: Trajectory, with_k: bool) -> str:
    header = TRAJECTORY_COLUMNS + (("k",) if with_k else ())
    rows = []
    for l in range(len(trajectory)):
        row = [l, trajectory.t[l], *trajectory.q[l], *trajectory.qdot[l], *trajectory.box_pose[l]]
        row += [trajectory.phi[l], trajectory.gamma[l], trajectory.f_actual_n[l], *trajectory.u[l]]
        if with_k:
            row.append(trajectory.k[l])
        rows.append(row)
    return _csv(header, rows)


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    return _csv(MetricsRow.CSV_FIELDS, ([getattr(r, f) for f in MetricsRow.CSV_FIELDS] for r in rows))


def timings_csv(rows: Sequence[MetricsRow]) -> str:
    return _csv(("model", "phi0", "wall_time"), ((r.model, r.phi0, r.wall_time) for r in rows))


def k_trajectories_csv(cells) -> str:
    out = []
    for config, ks in cells:
        out += [(config.variant.value, config.initial_distance, l, k) for l, k in enumerate(ks)]
    return _csv(("model", "phi0", "step", "k"), out)


def read_metrics_csv(path) -> List[MetricsRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                MetricsRow(
                    rec["model"],
                    float(rec["phi0"]),
                    float(rec["physical_inaccuracy"]),
                    float(rec["final_position_error"]),
                    float(rec["final_orientation_error"]),
                    0.0,
                    rec["status"],
                )
            )
    return rows


def read_trajectory_csv(path) -> Dict[str, np.ndarray]:
    """Columns of a trajectory file as float arrays."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
    return {name: data[:, i] for i, name in enumerate(header)}


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_cell(out: Path, report: SolveReport, trajectory: Trajectory) -> None:
    out.mkdir(parents=True, exist_ok=True)
    config = report.config
    vscm = config.variant is ModelVariant.VSCM
    atomic_write(out / "report.json", _json(report.as_dict()))
    decision = dict(
        config=config.as_dict(),
        status=report.metrics.status,
        schema=decision_schema(config.model, config.N, 3, min(config.arm.torque_limits)).describe(),
        decision=[float(v) for v in report.result.x],
    )
    atomic_write(out / "decision.json", _json(decision))
    atomic_write(out / "trajectory.csv", trajectory_csv(trajectory, vscm))
    trace_cols = ("outer", "penalty", "iteration", "objective", "pg_norm", "step_norm", "central_fd")
    trace_rows = ([row.get(c, "") for c in trace_cols] for row in report.result.trace)
    atomic_write(out / "solve_trace.csv", _csv(trace_cols, trace_rows))
    if vscm and trajectory.k is not None:
        atomic_write(out / "k_trajectory.csv", _csv(("step", "k"), enumerate(trajectory.k)))
