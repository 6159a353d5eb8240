import math

import numpy as np
import pytest

from cito.harness import ScenarioConfig, make_problem
from cito.nlp_solver import (
    IterationState,
    NonFiniteGradient,
    SolverOptions,
    Status,
    check_convergence,
    fd_gradient,
    projected_gradient,
    solve_augmented_lagrangian,
    solve_box_qn,
)
from cito.transcription import BLOWUP_PENALTY

OPTS = SolverOptions()
TIGHT = SolverOptions(grad_tol=1e-7, max_inner_iters=500)


def sphere(x):
    return float(x @ x)


def assert_monotone(result):
    f = [row["objective"] for row in result.trace]
    assert all(b <= a for a, b in zip(f, f[1:]))


# options and convergence logic ---------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(fd_step=0.0), dict(grad_tol=-1.0), dict(al_mu_growth=1.0), dict(max_inner_iters=-1), dict(armijo=1.0)],
)
def test_options_validation(kwargs):
    with pytest.raises(ValueError):
        SolverOptions(**kwargs)


def test_converged_when_feasible_and_stationary():
    st = IterationState(3, 10, 1e-9, 1e-4, violation=0.0, feas_tol=1e-4)
    assert check_convergence(st) is Status.CONVERGED


def test_time_limit_overrides_gradient():
    st = IterationState(3, 10, 1e-9, 1e-4, elapsed=11.0, time_limit=10.0)
    assert check_convergence(st) is Status.TIME_LIMIT


def test_infeasible_is_not_converged():
    assert check_convergence(IterationState(3, 10, 1e-9, 1e-4, violation=0.1, feas_tol=1e-4)) is Status.RUNNING
    assert check_convergence(IterationState(10, 10, 1e-9, 1e-4, violation=0.1, feas_tol=1e-4)) is Status.ITER_LIMIT


def test_numerical_failure_has_top_priority():
    st = IterationState(10, 10, 1e-9, 1e-4, elapsed=11.0, time_limit=10.0, numerical_failure=True)
    assert check_convergence(st) is Status.NUMERICAL_FAILURE


def test_projected_gradient_respects_bounds():
    pg = projected_gradient(np.array([0.0, 0.5, 1.0]), np.array([1.0, 1.0, -1.0]), np.zeros(3), np.ones(3))
    np.testing.assert_array_equal(pg, [0.0, -0.5, 0.0])


# finite differences ----------------------------------------------------------------


def test_fd_gradient_of_quadratic():
    g = fd_gradient(sphere, np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], atol=2 * OPTS.fd_step * 2)


def test_fd_gradient_of_constant():
    g = fd_gradient(lambda x: 3.7, np.array([0.3, -8.0, 1e3]))
    assert np.all(g == 0.0)


def test_fd_gradient_of_rosenbrock():
    def rosen(x):
        return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2

    g = fd_gradient(rosen, np.array([-1.2, 1.0]))
    # analytic value from tests/oracles/derive.py
    np.testing.assert_allclose(g, [-215.6, -88.0], rtol=1e-4)


def test_central_differences_are_second_order():
    def cubic(x):
        return float(np.sum(x**3))

    x = np.array([0.5, -1.5])
    exact = 3 * x**2
    fwd = fd_gradient(cubic, x, SolverOptions(fd_step=1e-4))
    ctr = fd_gradient(cubic, x, SolverOptions(fd_step=1e-4), central=True)
    assert np.max(np.abs(ctr - exact)) < 1e-3 * np.max(np.abs(fwd - exact))


def test_fd_probe_stays_inside_upper_bound():
    seen = []

    def f(x):
        seen.append(x[0])
        return float(x[0] ** 2)

    g = fd_gradient(f, np.array([1.0]), upper=np.array([1.0]))
    assert max(seen) <= 1.0
    assert g[0] == pytest.approx(2.0, abs=1e-5)


def test_fd_keeps_smooth_side_of_a_jump():
    def step_up(x):
        return float(x[0] + (1.0 if x[0] > 0 else 0.0))

    g = fd_gradient(step_up, np.array([0.0]), central=True)
    assert g[0] == pytest.approx(1.0, rel=1e-6)


def test_fd_retreats_from_blowup():
    def f(x):
        return BLOWUP_PENALTY if x[0] > 0 else float(x[0] ** 2 - x[0])

    g = fd_gradient(f, np.array([0.0]))
    assert g[0] == pytest.approx(-1.0, abs=1e-5)


def test_fd_blowup_on_both_sides_raises():
    def f(x):
        return BLOWUP_PENALTY if x[1] != 0.5 else float(x @ x)

    with pytest.raises(NonFiniteGradient) as err:
        fd_gradient(f, np.array([0.0, 0.5]))
    assert err.value.index == 1


def test_fd_needs_finite_base_point():
    with pytest.raises(FloatingPointError):
        fd_gradient(lambda x: math.inf, np.zeros(2))


def test_fd_is_independent_of_worker_count():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((12, 12))

    def f(x):
        return float(np.sin(A @ x).sum())

    x = rng.standard_normal(12)
    g1 = fd_gradient(f, x, SolverOptions(workers=1), central=True)
    g4 = fd_gradient(f, x, SolverOptions(workers=4), central=True)
    np.testing.assert_array_equal(g1, g4)


# box-constrained quasi-Newton --------------------------------------------------------


def test_interior_quadratic():
    target = np.array([0.3, -1.2, 2.0])
    r = solve_box_qn(lambda x: sphere(x - target), np.zeros(3), np.full(3, -5), np.full(3, 5), TIGHT)
    assert r.status is Status.CONVERGED
    assert r.inner_iters <= 50
    np.testing.assert_allclose(r.x, target, atol=1e-6)
    assert_monotone(r)


def test_face_projection_of_separable_quadratic():
    target = np.array([2.0, -3.0, 0.4])
    lo, hi = np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])
    r = solve_box_qn(lambda x: sphere(x - target), np.zeros(3), lo, hi, TIGHT)
    assert r.status is Status.CONVERGED
    np.testing.assert_allclose(r.x, np.clip(target, lo, hi), atol=1e-6)


def test_sixty_dimensional_quadratic_matches_linear_solve():
    rng = np.random.default_rng(42)
    Q, _ = np.linalg.qr(rng.standard_normal((60, 60)))
    A = Q @ np.diag(np.linspace(1.0, 10.0, 60)) @ Q.T
    b = rng.standard_normal(60)
    r = solve_box_qn(lambda x: 0.5 * x @ A @ x - b @ x, np.zeros(60), np.full(60, -1e3), np.full(60, 1e3), TIGHT)
    np.testing.assert_allclose(r.x, np.linalg.solve(A, b), atol=1e-5)
    assert_monotone(r)


def test_rejects_infeasible_start():
    with pytest.raises(ValueError):
        solve_box_qn(sphere, np.array([2.0]), np.array([-1.0]), np.array([1.0]))


def test_zero_iteration_limit_returns_start():
    x0 = np.array([0.5, 0.5])
    r = solve_box_qn(sphere, x0, -np.ones(2), np.ones(2), SolverOptions(max_inner_iters=0))
    assert r.status is Status.ITER_LIMIT
    np.testing.assert_array_equal(r.x, x0)


def test_wall_clock_limit():
    r = solve_box_qn(sphere, np.ones(4), -np.ones(4) * 9, np.ones(4) * 9, OPTS, deadline=0.0)
    assert r.status is Status.TIME_LIMIT


def asymmetric_kink(x):
    return 100.0 * max(0.0, x[0]) + 50.0 * max(0.0, -x[0]) + (x[1] - 1.0) ** 2


def test_kink_coordinate_is_frozen_and_the_rest_descends():
    r = solve_box_qn(asymmetric_kink, np.zeros(2), -np.ones(2), np.full(2, 3.0), SolverOptions(max_inner_iters=40))
    # steps that still lower f may nudge the kinked coordinate slightly
    assert abs(r.x[0]) < 1e-6
    assert r.x[1] == pytest.approx(1.0, abs=1e-6)
    assert_monotone(r)


def test_no_descent_at_a_kink_is_a_numerical_failure():
    r = solve_box_qn(lambda x: asymmetric_kink(np.array([x[0], 1.0])), np.zeros(1), -np.ones(1), np.ones(1))
    assert r.status is Status.NUMERICAL_FAILURE
    assert r.x[0] == 0.0


def test_box_qn_is_deterministic():
    def f(x):
        return float(np.sum((x - 0.3) ** 4) + np.sin(x).sum())

    a = solve_box_qn(f, np.zeros(5), -np.ones(5), np.ones(5), SolverOptions(workers=1))
    b = solve_box_qn(f, np.zeros(5), -np.ones(5), np.ones(5), SolverOptions(workers=3))
    np.testing.assert_array_equal(a.x, b.x)
    assert a.n_fev == b.n_fev


# augmented Lagrangian -----------------------------------------------------------------


def test_active_lower_constraint():
    r = solve_augmented_lagrangian(
        lambda x: float(x[0] ** 2), lambda x: np.array([1.0 - x[0]]), np.array([3.0]), [-10.0], [10.0], TIGHT
    )
    assert r.x[0] == pytest.approx(1.0, abs=1e-4)
    assert r.max_violation <= TIGHT.feas_tol


def test_inactive_constraint_matches_box_solver():
    def f(x):
        return float((x[0] - 0.5) ** 2 + (x[1] + 0.25) ** 2)

    lo, hi = -np.ones(2) * 4, np.ones(2) * 4
    al = solve_augmented_lagrangian(f, lambda x: np.array([x[0] - 3.0]), np.zeros(2), lo, hi, TIGHT)
    qn = solve_box_qn(f, np.zeros(2), lo, hi, TIGHT)
    np.testing.assert_allclose(al.x, qn.x, atol=1e-6)
    assert al.status is Status.CONVERGED


def test_bilinear_constraint_matches_grid_search():
    r = solve_augmented_lagrangian(
        lambda x: float((x[0] - 2) ** 2 + (x[1] - 2) ** 2),
        lambda x: np.array([x[0] * x[1] - 1.0]),
        np.zeros(2),
        np.zeros(2),
        np.full(2, 3.0),
        TIGHT,
    )
    # grid oracle on [0, 3]^2 with spacing 1e-3 (tests/oracles/derive.py): f = 2 at (1, 1)
    assert r.fun == pytest.approx(2.0, abs=1e-3)
    np.testing.assert_allclose(r.x, [1.0, 1.0], atol=1e-3)
    assert r.max_violation <= 1e-4


def test_al_reports_multipliers():
    r = solve_augmented_lagrangian(
        lambda x: float(x[0] ** 2), lambda x: np.array([1.0 - x[0]]), np.array([3.0]), [-10.0], [10.0], TIGHT
    )
    # KKT: 2 x* = lambda at x* = 1
    assert r.multipliers[0] == pytest.approx(2.0, rel=1e-2)


# on the pushing problem -----------------------------------------------------------------


def test_scm_gradient_at_zero_guess_is_usable():
    prob = make_problem(ScenarioConfig("SCM", 0.11))
    x = prob.schema.initial()
    g = fd_gradient(prob.objective, x, OPTS, lower=prob.schema.lower(), upper=prob.schema.upper())
    assert np.all(np.isfinite(g))
    assert np.max(np.abs(g)) > 0
