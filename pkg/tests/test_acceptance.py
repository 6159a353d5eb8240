"""Acceptance criteria of the package, one test per criterion.

Each test prints a ``PASS`` or ``FAIL`` line (collected into the terminal
summary by conftest.py) and then asserts. The sweep-based criteria share
one full 3 x 3 sweep; the determinism criterion runs a second one.
Expect the module to take about an hour on a single core.
"""

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from cito.config import default_sweep
from cito.contact_models import ContactModelSpec, ModelVariant, scm_force, vscm_force
from cito.harness import cell_failed, compare_models, read_metrics_csv, read_trajectory_csv, replay_file
from cito.nlp_solver import SolverOptions, Status, solve_augmented_lagrangian, solve_box_qn
from cito.planar_dynamics import ArmModel, BoxModel, WorldState, rollout
from cito.verification import check_jacobians, energy_drift

from .conftest import FAR_BOX, record_criterion

pytestmark = pytest.mark.slow

# 1 s free-arm RK4 reference at dt = 1e-5 from tests/oracles/derive.py
FREE_Q0 = (0.4, -0.9, 0.7)
FREE_TORQUE = (0.1, -0.05, 0.005)
FREE_RK4_1S = np.array([0.6518548250725054, -1.3588381038148953, 0.7342581187170925])

SWEEP_BUDGET = 30 * 60.0
CCCM_BUDGET = 600.0
K_MAX = 100.0
# a run counts as converged when the solver returned a usable end point;
# IterLimit is included, see the ledger
USABLE = {Status.CONVERGED.value, Status.ITER_LIMIT.value}


def verdict(name, ok, detail):
    record_criterion(name, ok, detail)
    assert ok, detail


# shared sweep ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep_a")
    t0 = time.perf_counter()
    rows = compare_models(default_sweep().cells, out)
    return out, rows, time.perf_counter() - t0


def rows_of(rows, model):
    return sorted((r for r in rows if r.model == model), key=lambda r: r.phi0)


def cell_dir(out, model, phi0):
    return Path(out) / f"{model}_phi{phi0:.3f}"


# criteria ---------------------------------------------------------------------------------


def test_contact_model_exactness():
    scm_force(ContactModelSpec(ModelVariant.SCM), 0.0)  # compile outside the timed region
    t0 = time.perf_counter()
    # includes c = 1e3 and c = 5e3, the two curvature families of the force-law figure
    K, C, PHI = np.meshgrid(np.linspace(10.0, 200.0, 10), np.linspace(1e3, 1e4, 10), np.linspace(-0.005, 0.1, 10))
    got = np.array([scm_force(ContactModelSpec(ModelVariant.SCM, k=k, c=c), p) for k, c, p in zip(K.flat, C.flat, PHI.flat)])
    want = np.array([k * math.exp(-(c / k) * p) for k, c, p in zip(K.flat, C.flat, PHI.flat)])
    worst = float(np.max(np.abs(got - want) / want))
    zero = vscm_force(ContactModelSpec(ModelVariant.VSCM), np.zeros(50), np.linspace(-0.05, 0.5, 50))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and bool(np.all(zero == 0.0)) and elapsed < 1.0
    verdict("contact-model exactness", ok, f"max rel err {worst:.2e} on {got.size} points, k=0 gives 0, {elapsed:.2f} s")


def test_simulator_fidelity():
    t0 = time.perf_counter()
    init = WorldState.at_rest(FREE_Q0, FAR_BOX)
    traj = rollout(ArmModel(), BoxModel(), init, np.tile(FREE_TORQUE, (20, 1)), 0.05, 1e-3, compensate=False)
    q_err = float(np.max(np.abs(traj.q[-1] - FREE_RK4_1S)))
    drift = energy_drift()
    try:
        jac = check_jacobians()
        jac_ok = True
    except AssertionError as exc:
        jac, jac_ok = str(exc), False
    elapsed = time.perf_counter() - t0
    ok = q_err <= 1e-3 and drift < 0.01 and jac_ok and elapsed < 30.0
    detail = f"joint err {q_err:.2e} rad, energy drift {drift:.3%}, {jac}, {elapsed:.1f} s"
    verdict("simulator fidelity", ok, detail)


def test_solver_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    opts = SolverOptions(grad_tol=1e-7, max_inner_iters=500)
    qn_err = 0.0
    for _ in range(3):
        Q, _ = np.linalg.qr(rng.standard_normal((60, 60)))
        A = Q @ np.diag(np.linspace(1.0, 10.0, 60)) @ Q.T
        b = rng.standard_normal(60)
        r = solve_box_qn(lambda x: 0.5 * x @ A @ x - b @ x, np.zeros(60), np.full(60, -1e3), np.full(60, 1e3), opts)
        qn_err = max(qn_err, float(np.max(np.abs(r.x - np.linalg.solve(A, b)))))
    al = solve_augmented_lagrangian(
        lambda x: float((x[0] - 2) ** 2 + (x[1] - 2) ** 2),
        lambda x: np.array([x[0] * x[1] - 1.0]),
        np.zeros(2),
        np.zeros(2),
        np.full(2, 3.0),
        opts,
    )
    # grid oracle (tests/oracles/derive.py, spacing 1e-3 on [0, 3]^2): minimum 2 at (1, 1)
    al_err = max(float(np.max(np.abs(al.x - 1.0))), abs(al.fun - 2.0))
    elapsed = time.perf_counter() - t0
    ok = qn_err <= 1e-5 and al_err <= 1e-3 and elapsed < 60.0
    verdict("solver oracle equivalence", ok, f"QN err {qn_err:.1e}, AL vs grid {al_err:.1e}, {elapsed:.1f} s")


def test_cccm_feasibility(sweep):
    out, rows, _ = sweep
    (row,) = [r for r in rows if r.model == "CCCM" and r.phi0 == 0.11]
    cell = cell_dir(out, "CCCM", 0.11)
    traj = read_trajectory_csv(cell / "trajectory.csv")
    record = json.loads((cell / "decision.json").read_text(encoding="utf-8"))
    (blk,) = [b for b in record["schema"] if b["name"] == "s"]
    slack = np.array(record["decision"][blk["offset"] : blk["offset"] + blk["length"]])
    comp = float(np.max(traj["gamma_virtual"] * traj["phi"] - slack))
    min_phi = float(np.min(traj["phi"]))
    with open(Path(out) / "timings.csv", newline="", encoding="utf-8") as fh:
        wall = [float(t["wall_time"]) for t in csv.DictReader(fh) if t["model"] == "CCCM" and float(t["phi0"]) == 0.11][0]
    ok = comp <= 1e-4 and min_phi >= -1e-4 and wall <= CCCM_BUDGET and not cell_failed(row)
    detail = f"max(gamma phi - s) {comp:.2e}, min phi {min_phi:.2e}, solve {wall:.0f} s, status {row.status}"
    verdict("CCCM feasibility at convergence", ok, detail)


def test_task_success(sweep):
    _, rows, wall = sweep
    vscm = {r.phi0: r.final_position_error for r in rows_of(rows, "VSCM")}
    scm = {r.phi0: r.final_position_error for r in rows_of(rows, "SCM")}
    ok_v = len(vscm) == 3 and all(e < 0.10 for e in vscm.values())
    ok_s = all(scm.get(d, math.inf) < 0.10 for d in (0.11, 0.17))
    ok = ok_v and ok_s and wall <= SWEEP_BUDGET
    fmt = lambda d: ", ".join(f"{k:.2f}: {v:.1e}" for k, v in sorted(d.items()))  # noqa: E731
    verdict("task success", ok, f"VSCM pos err [{fmt(vscm)}] m, SCM [{fmt(scm)}] m, sweep {wall / 60:.1f} min")


def test_physical_accuracy_trend(sweep):
    _, rows, _ = sweep
    vscm = [r.physical_inaccuracy for r in rows_of(rows, "VSCM")]
    scm = [r.physical_inaccuracy for r in rows_of(rows, "SCM")]
    cccm = [r.physical_inaccuracy for r in rows_of(rows, "CCCM") if r.status in USABLE]
    ok_sum = len(vscm) == len(scm) == 3 and sum(vscm) < sum(scm)
    ok_v = all(math.isfinite(v) and v >= 0 for v in vscm)
    ok_c = all(v <= 0.15 for v in cccm)
    detail = (
        f"sum VSCM {sum(vscm):.3f} vs SCM {sum(scm):.3f} N s; "
        f"CCCM {', '.join(f'{v:.3f}' for v in cccm)} N s (limit 0.15)"
    )
    verdict("physical-accuracy trend", ok_sum and ok_v and ok_c, detail)


def test_stiffness_bang_bang(sweep):
    out, rows, _ = sweep
    parts, ok = [], True
    for r in rows_of(rows, "VSCM"):
        if r.status not in USABLE:
            continue
        k = read_trajectory_csv(cell_dir(out, "VSCM", r.phi0) / "trajectory.csv")["k"]
        in_bounds = bool(np.all((k >= 0.0) & (k <= K_MAX)))
        low, high = bool(np.any(k <= 0.1 * K_MAX)), bool(np.any(k >= 0.9 * K_MAX))
        ok &= in_bounds and low and high
        parts.append(f"{r.phi0:.2f}: k in [{k.min():.3f}, {k.max():.3f}]")
    verdict("stiffness bang-bang tendency", ok and bool(parts), "; ".join(parts) or "no converged VSCM run")


def test_determinism(sweep, tmp_path_factory):
    out, _, _ = sweep
    again = tmp_path_factory.mktemp("sweep_b")
    compare_models(default_sweep().cells, again)
    names = ["metrics.csv", "k_trajectories.csv"] + sorted(
        str(p.relative_to(out)) for p in Path(out).glob("*/trajectory.csv")
    )
    differ = [n for n in names if (Path(out) / n).read_bytes() != (Path(again) / n).read_bytes()]
    verdict("determinism", not differ, f"{len(names)} files compared, differing: {differ or 'none'}")


def test_replay_round_trip(sweep, tmp_path):
    out, _, _ = sweep
    saved = {(r.model, r.phi0): r for r in read_metrics_csv(Path(out) / "metrics.csv")}
    mismatched, count = [], 0
    for path in sorted(Path(out).glob("*/decision.json")):
        config, metrics, _ = replay_file(path, tmp_path / path.parent.name)
        count += 1
        if not metrics.same_result(saved[(metrics.model, metrics.phi0)]):
            mismatched.append(config.name)
    verdict("replay round-trip", count == 9 and not mismatched, f"{count} cells replayed, mismatched: {mismatched or 'none'}")
