"""Independent oracles and the check suite behind ``cito check``.

The oracles do not reuse the simulator kernels: a recursive Newton-Euler
pass for the arm, an RK4 integrator built on the absolute-angle Lagrangian,
an exact point-to-segment distance for the box, and brute-force or
closed-form answers for the solver problems.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, List, Tuple

import numpy as np
from numba import njit

from .contact_models import ContactModelSpec, ModelVariant, scm_force, vscm_force
from .nlp_solver import SolverOptions, solve_augmented_lagrangian, solve_box_qn
from .planar_dynamics import (
    ArmModel,
    BoxModel,
    WorldState,
    bias_forces,
    ee_kinematics,
    mass_matrix,
    point_box_distance,
    rollout,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


# arm oracles -----------------------------------------------------------------------


def _perp(theta: float) -> np.ndarray:
    return np.array([-math.sin(theta), math.cos(theta)])


def _unit(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def rnea(arm: ArmModel, q, qd, qdd, damping: bool = True) -> np.ndarray:
    """Joint torques of the planar chain by recursive Newton-Euler."""
    q, qd, qdd = (np.asarray(v, dtype=np.float64) for v in (q, qd, qdd))
    th = np.cumsum(q)
    w = np.cumsum(qd)
    al = np.cumsum(qdd)
    L = arm.link_lengths
    a_joint = np.zeros(2)
    a_com = []
    for i in range(3):
        r = L[i] * _unit(th[i])
        rc = 0.5 * r
        a_com.append(a_joint + al[i] * _perp(th[i]) * 0.5 * L[i] - w[i] ** 2 * rc)
        a_joint = a_joint + al[i] * _perp(th[i]) * L[i] - w[i] ** 2 * r
    tau = np.zeros(3)
    f_next = np.zeros(2)
    n_next = 0.0
    for i in reversed(range(3)):
        r = L[i] * _unit(th[i])
        rc = 0.5 * r
        fi = arm.link_masses[i] * a_com[i]
        n = arm.link_inertias[i] * al[i] + n_next + (rc[0] * fi[1] - rc[1] * fi[0]) + (r[0] * f_next[1] - r[1] * f_next[0])
        f_next = fi + f_next
        n_next = n
        tau[i] = n
    if damping:
        tau += np.asarray(arm.joint_damping) * qd
    return tau


def mass_matrix_oracle(arm: ArmModel, q) -> np.ndarray:
    """Column j is the torque for unit acceleration of joint j at rest."""
    return np.column_stack([rnea(arm, q, np.zeros(3), np.eye(3)[j], damping=False) for j in range(3)])


def bias_oracle(arm: ArmModel, q, qd) -> np.ndarray:
    return rnea(arm, q, qd, np.zeros(3))


@njit(cache=True)
def _lagrange_accel(p, u, y):
    """Joint accelerations from the absolute-angle Lagrangian of the chain.

    With absolute angles ``a = T q`` (T lower-triangular ones) the kinetic
    energy is ``1/2 sum B_ij cos(a_i - a_j) a'_i a'_j`` and the equations read
    ``sum_j B_ij cos(a_i - a_j) a''_j + B_ij sin(a_i - a_j) a'_j^2 = Q_i``
    with joint torques ``tau = T^T Q``.
    """
    L1, L2, m1, m2, m3, I1, I2, I3, d1, d2, d3, L3 = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9], p[10], p[11]
    lc1, lc2, lc3 = 0.5 * L1, 0.5 * L2, 0.5 * L3
    B = np.empty((3, 3))
    B[0, 0] = I1 + m1 * lc1 * lc1 + (m2 + m3) * L1 * L1
    B[1, 1] = I2 + m2 * lc2 * lc2 + m3 * L2 * L2
    B[2, 2] = I3 + m3 * lc3 * lc3
    B[0, 1] = B[1, 0] = (m2 * lc2 + m3 * L2) * L1
    B[0, 2] = B[2, 0] = m3 * lc3 * L1
    B[1, 2] = B[2, 1] = m3 * lc3 * L2
    a = np.array([y[0], y[0] + y[1], y[0] + y[1] + y[2]])
    ad = np.array([y[3], y[3] + y[4], y[3] + y[4] + y[5]])
    Ma = np.empty((3, 3))
    s = np.zeros(3)
    for i in range(3):
        for j in range(3):
            Ma[i, j] = B[i, j] * math.cos(a[i] - a[j])
            s[i] += B[i, j] * math.sin(a[i] - a[j]) * ad[j] * ad[j]
    T = np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0]])
    M = T.T @ Ma @ T
    rhs = u - np.array([d1 * y[3], d2 * y[4], d3 * y[5]]) - T.T @ s
    return np.linalg.solve(M, rhs)


@njit(cache=True)
def _rk4(p, u, y, dt, n):
    out = y.copy()
    for _ in range(n):
        k1 = np.concatenate((out[3:], _lagrange_accel(p, u, out)))
        y2 = out + 0.5 * dt * k1
        k2 = np.concatenate((y2[3:], _lagrange_accel(p, u, y2)))
        y3 = out + 0.5 * dt * k2
        k3 = np.concatenate((y3[3:], _lagrange_accel(p, u, y3)))
        y4 = out + dt * k3
        k4 = np.concatenate((y4[3:], _lagrange_accel(p, u, y4)))
        out = out + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return out


def rk4_free_arm(arm: ArmModel, q0, qd0, torque, T: float, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate the uncompensated free arm with classic RK4."""
    L, m, I, d = arm.link_lengths, arm.link_masses, arm.link_inertias, arm.joint_damping
    p = np.array([L[0], L[1], m[0], m[1], m[2], I[0], I[1], I[2], d[0], d[1], d[2], L[2]])
    y = np.concatenate([np.asarray(q0, float), np.asarray(qd0, float)])
    y = _rk4(p, np.asarray(torque, dtype=np.float64), y, dt, int(round(T / dt)))
    return y[:3], y[3:]


def tip_position_oracle(arm: ArmModel, q) -> np.ndarray:
    th = np.cumsum(q)
    p = sum(L * _unit(t) for L, t in zip(arm.link_lengths, th))
    c, s = math.cos(th[2]), math.sin(th[2])
    ox, oy = arm.ee_offset
    return p + np.array([c * ox - s * oy, s * ox + c * oy])


# box oracle ------------------------------------------------------------------------


def box_corners(box: BoxModel, pose) -> np.ndarray:
    h = box.half_extent
    c, s = math.cos(pose[2]), math.sin(pose[2])
    local = np.array([[h, h], [-h, h], [-h, -h], [h, -h]])
    return local @ np.array([[c, s], [-s, c]]) + np.asarray(pose[:2])


def signed_distance_oracle(box: BoxModel, pose, point) -> float:
    """Exact distance to the four boundary segments, negative inside."""
    corners = box_corners(box, pose)
    p = np.asarray(point, dtype=np.float64)
    best = math.inf
    inside = True
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        ab = b - a
        t = min(1.0, max(0.0, float((p - a) @ ab / (ab @ ab))))
        best = min(best, float(np.linalg.norm(p - (a + t * ab))))
        # corners run counter-clockwise, so inside points are left of every edge
        if ab[0] * (p - a)[1] - ab[1] * (p - a)[0] < 0:
            inside = False
    return -best if inside else best


# checks ----------------------------------------------------------------------------


def check_contact_models() -> str:
    ks = np.linspace(10.0, 200.0, 10)
    # c = 1e3 and c = 5e3 are the two curvature families of the force-law figure
    cs = np.array([1e3, 2e3, 3e3, 4e3, 5e3, 6e3, 7e3, 8e3, 9e3, 1e4])
    phis = np.linspace(-0.005, 0.1, 10)
    worst = 0.0
    for k in ks:
        for c in cs:
            spec = ContactModelSpec(ModelVariant.SCM, k=float(k), c=float(c))
            got = np.asarray(scm_force(spec, phis))
            want = np.array([k * math.exp(-(c / k) * p) for p in phis])
            worst = max(worst, float(np.max(np.abs(got - want) / want)))
    zero = vscm_force(ContactModelSpec(ModelVariant.VSCM), np.zeros(phis.size), phis)
    if not worst <= 1e-12:
        raise AssertionError(f"relative error {worst:.3g}")
    if np.any(np.asarray(zero) != 0.0):
        raise AssertionError("zero stiffness gave a non-zero force")
    return f"max relative error {worst:.2g} over 1000 grid points; k=0 gives 0"


def check_mass_matrix(arm: ArmModel = ArmModel(), samples: int = 50) -> str:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(samples):
        q = rng.uniform(-math.pi, math.pi, 3)
        qd = rng.uniform(-3, 3, 3)
        worst = max(worst, float(np.max(np.abs(mass_matrix(arm, q) - mass_matrix_oracle(arm, q)))))
        worst = max(worst, float(np.max(np.abs(bias_forces(arm, q, qd) - bias_oracle(arm, q, qd)))))
    if worst > 1e-10:
        raise AssertionError(f"deviation {worst:.3g}")
    return f"mass matrix and bias within {worst:.2g} of recursive Newton-Euler"


FAR_BOX = np.array([10.0, 10.0, 0.0])
FREE_ARM_Q0 = np.array([0.4, -0.9, 0.7])
FREE_ARM_TORQUE = np.array([0.1, -0.05, 0.005])


def free_arm_rollout_error(arm: ArmModel = ArmModel(), dt: float = 1e-3) -> float:
    """Largest joint-angle gap after 1 s between the simulator and RK4 at 1e-5 s."""
    init = WorldState.at_rest(FREE_ARM_Q0, FAR_BOX)
    U = np.tile(FREE_ARM_TORQUE, (20, 1))
    traj = rollout(arm, BoxModel(), init, U, 0.05, dt, compensate=False)
    q_ref, _ = rk4_free_arm(arm, FREE_ARM_Q0, np.zeros(3), FREE_ARM_TORQUE, 1.0, 1e-5)
    return float(np.max(np.abs(traj.q[-1] - q_ref)))


def check_free_arm(arm: ArmModel = ArmModel()) -> str:
    err = free_arm_rollout_error(arm)
    if err > 1e-3:
        raise AssertionError(f"joint error {err:.3g} rad")
    return f"max joint error {err:.3g} rad after 1 s"


def energy_drift(arm: ArmModel = ArmModel(), qd0=(1.0, -1.5, 2.0)) -> float:
    """Relative kinetic energy change of the passive, undamped arm over 1 s."""
    arm = ArmModel(arm.link_lengths, arm.link_masses, arm.link_inertias, (0.0, 0.0, 0.0), arm.torque_limits, arm.ee_offset)
    init = WorldState(FREE_ARM_Q0, np.asarray(qd0, float), FAR_BOX)
    traj = rollout(arm, BoxModel(), init, np.zeros((20, 3)), 0.05, 1e-3, compensate=False)

    def ke(q, qd):
        return 0.5 * qd @ mass_matrix_oracle(arm, q) @ qd

    e0 = ke(init.q, init.qdot)
    return float(max(abs(ke(traj.q[l], traj.qdot[l]) - e0) for l in range(len(traj))) / e0)


def check_energy(arm: ArmModel = ArmModel()) -> str:
    drift = energy_drift(arm)
    if drift > 0.01:
        raise AssertionError(f"drift {drift:.3%}")
    return f"kinetic energy drift {drift:.3%}"


def check_jacobians(arm: ArmModel = ArmModel(), box: BoxModel = BoxModel(), samples: int = 50) -> str:
    rng = np.random.default_rng(5)
    h = 1e-6
    worst_j = 0.0
    worst_n = 0.0
    for _ in range(samples):
        q = rng.uniform(-math.pi, math.pi, 3)
        p, _, J = ee_kinematics(arm, q, np.zeros(3))
        if np.max(np.abs(p - tip_position_oracle(arm, q))) > 1e-12:
            raise AssertionError("end-effector position disagrees with the oracle")
        fd = np.column_stack(
            [(tip_position_oracle(arm, q + h * e) - tip_position_oracle(arm, q - h * e)) / (2 * h) for e in np.eye(3)]
        )
        worst_j = max(worst_j, float(np.max(np.abs(J - fd))))
        # distance gradient w.r.t. the query point is the contact normal
        pose = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-math.pi, math.pi)])
        pt = pose[:2] + rng.uniform(-0.15, 0.15, 2)
        cq = point_box_distance(box, pose, pt)
        grad = np.array(
            [
                (signed_distance_oracle(box, pose, pt + h * e) - signed_distance_oracle(box, pose, pt - h * e)) / (2 * h)
                for e in np.eye(2)
            ]
        )
        if abs(cq.phi) > 2 * h and _far_from_ridges(box, pose, pt, 2 * h):
            worst_n = max(worst_n, float(np.max(np.abs(cq.normal - grad))))
    if worst_j > 1e-6 or worst_n > 1e-6:
        raise AssertionError(f"Jacobian gap {worst_j:.3g}, normal gap {worst_n:.3g}")
    return f"Jacobian within {worst_j:.2g}, distance normal within {worst_n:.2g} of central differences"


def _far_from_ridges(box: BoxModel, pose, pt, eps: float) -> bool:
    """False near the inner diagonals, where the closest face switches."""
    c, s = math.cos(pose[2]), math.sin(pose[2])
    d = np.asarray(pt) - pose[:2]
    x, y = c * d[0] + s * d[1], -s * d[0] + c * d[1]
    inside = max(abs(x), abs(y)) < box.half_extent + eps
    return not (inside and abs(abs(x) - abs(y)) < eps)


def check_signed_distance(box: BoxModel = BoxModel(), samples: int = 4000) -> str:
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(samples):
        pose = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-math.pi, math.pi)])
        pt = pose[:2] + rng.uniform(-3, 3, 2) * box.half_extent
        got = point_box_distance(box, pose, pt)
        want = signed_distance_oracle(box, pose, pt)
        worst = max(worst, abs(got.phi - want))
        # the witness point lies on the boundary and the ee witness is the query itself
        if abs(signed_distance_oracle(box, pose, got.witness_box)) > 1e-12:
            raise AssertionError("box witness point is off the boundary")
    if worst > 1e-12:
        raise AssertionError(f"distance error {worst:.3g}")
    return f"{samples} random points within {worst:.2g} of the exact segment distance"


def random_quadratic(n: int, rng: np.random.Generator):
    A = rng.standard_normal((n, n))
    H = A @ A.T / n + np.eye(n)
    b = rng.standard_normal(n)
    return H, b


def quadratic_solver_error(n: int = 60, trials: int = 3) -> float:
    """Gap between box-QN (finite differences, loose bounds) and ``H x = b``."""
    rng = np.random.default_rng(17)
    worst = 0.0
    opts = SolverOptions(max_inner_iters=500, grad_tol=1e-9, initial_step=1.0, max_step=math.inf)
    for _ in range(trials):
        H, b = random_quadratic(n, rng)
        x_star = np.linalg.solve(H, b)

        def f(x):
            return 0.5 * x @ H @ x - b @ x

        res = solve_box_qn(f, np.zeros(n), np.full(n, -1e3), np.full(n, 1e3), opts)
        worst = max(worst, float(np.max(np.abs(res.x - x_star))))
    return worst


def check_box_qn() -> str:
    err = quadratic_solver_error()
    if err > 1e-5:
        raise AssertionError(f"solution error {err:.3g}")
    return f"60-dim quadratics solved to {err:.2g}"


def al_test_problem() -> Tuple[Callable, Callable, np.ndarray, np.ndarray]:
    """``min (x-2)^2 + (y-2)^2`` with ``x y <= 1`` on ``[0, 3]^2``.

    Both functions accept a point or a stack of points (last axis 2).
    """

    def f(z):
        z = np.asarray(z, dtype=np.float64)
        return (z[..., 0] - 2.0) ** 2 + (z[..., 1] - 2.0) ** 2

    def g(z):
        z = np.asarray(z, dtype=np.float64)
        return np.atleast_1d(z[..., 0] * z[..., 1] - 1.0)

    return f, g, np.zeros(2), np.full(2, 3.0)


def grid_search(f, g, lower, upper, n: int = 601, rounds: int = 4) -> np.ndarray:
    """Feasible grid minimum, refined around the incumbent."""
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    best = None
    for _ in range(rounds):
        X, Y = np.meshgrid(np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n), indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        vals = np.where(g(pts) <= 0, f(pts), np.inf)
        best = pts[int(np.argmin(vals))]
        span = (hi - lo) / (n - 1) * 10
        lo = np.maximum(np.asarray(lower, float), best - span)
        hi = np.minimum(np.asarray(upper, float), best + span)
    return best


def al_solver_error() -> Tuple[float, np.ndarray, np.ndarray]:
    f, g, lo, hi = al_test_problem()
    ref = grid_search(f, g, lo, hi)
    opts = SolverOptions(grad_tol=1e-6, feas_tol=1e-6, max_inner_iters=300, max_outer_iters=20, initial_step=0.5)
    res = solve_augmented_lagrangian(f, g, np.zeros(2), lo, hi, opts)
    return float(np.max(np.abs(res.x - ref))), res.x, ref


def check_augmented_lagrangian() -> str:
    err, x, ref = al_solver_error()
    if err > 1e-3:
        raise AssertionError(f"solver {x} vs grid {ref}")
    return f"AL solution {np.round(x, 6)} within {err:.2g} of the grid optimum"


CHECKS = (
    ("contact model exactness", check_contact_models),
    ("mass matrix and bias vs Newton-Euler", check_mass_matrix),
    ("free arm vs RK4", check_free_arm),
    ("passive energy drift", check_energy),
    ("Jacobian finite differences", check_jacobians),
    ("signed distance vs exact geometry", check_signed_distance),
    ("box quasi-Newton vs direct solve", check_box_qn),
    ("augmented Lagrangian vs grid search", check_augmented_lagrangian),
)


def run_checks() -> List[CheckResult]:
    out = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            detail = fn()
            passed = True
        except AssertionError as exc:
            detail, passed = str(exc), False
        out.append(CheckResult(name, passed, detail, time.perf_counter() - t0))
    return out
