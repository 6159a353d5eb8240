"""Finite-difference NLP machinery for black-box rollouts.

``solve_box_qn`` is a projected limited-memory BFGS method for bound
constrained problems; ``solve_augmented_lagrangian`` wraps it in a
Powell-Hestenes-Rockafellar augmented Lagrangian loop for inequality
constraints ``g(x) <= 0``. Gradients come from forward differences; when a
line search fails the iteration is retried once with central differences.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .transcription import BLOWUP_PENALTY

log = logging.getLogger(__name__)

JUMP_RATIO = 100.0
MAX_STALLS = 3


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    ITER_LIMIT = "IterLimit"
    TIME_LIMIT = "TimeLimit"
    NUMERICAL_FAILURE = "NumericalFailure"
    RUNNING = "Running"


class NonFiniteGradient(FloatingPointError):
    """A finite-difference probe blew up on both sides of a coordinate."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"finite-difference probes blow up on both sides of coordinate {index}")


@dataclass(frozen=True)
class SolverOptions:
    max_outer_iters: int = 15
    max_inner_iters: int = 200
    fd_step: float = 1e-6
    grad_tol: float = 1e-4
    feas_tol: float = 1e-4
    al_mu0: float = 10.0
    al_mu_growth: float = 10.0
    wall_clock_limit: float = 600.0
    memory: int = 10
    armijo: float = 1e-4
    backtrack: float = 0.5
    # largest coordinate change of a steepest-descent trial step
    initial_step: float = 0.1
    # cap on the largest coordinate change of any trial step
    max_step: float = 0.5
    workers: int = 1

    def __post_init__(self):
        positives = (
            self.max_outer_iters,
            self.fd_step,
            self.grad_tol,
            self.feas_tol,
            self.al_mu0,
            self.wall_clock_limit,
            self.memory,
            self.initial_step,
            self.max_step,
            self.workers,
        )
        if min(positives) <= 0 or self.max_inner_iters < 0:
            raise ValueError("solver options must be positive")
        if self.al_mu_growth <= 1:
            raise ValueError("al_mu_growth must exceed 1")
        if not (0 < self.armijo < 1 and 0 < self.backtrack < 1):
            raise ValueError("line search constants must lie in (0, 1)")


@dataclass
class SolveResult:
    x: np.ndarray
    fun: float
    status: Status
    inner_iters: int = 0
    outer_iters: int = 0
    n_fev: int = 0
    wall_time: float = 0.0
    max_violation: float = 0.0
    pg_norm: float = math.inf
    multipliers: Optional[np.ndarray] = None
    trace: List[dict] = field(default_factory=list)


@dataclass(frozen=True)
class IterationState:
    iteration: int
    max_iters: int
    pg_norm: float
    grad_tol: float
    elapsed: float = 0.0
    time_limit: float = math.inf
    violation: float = 0.0
    feas_tol: float = math.inf
    numerical_failure: bool = False


def check_convergence(state: IterationState) -> Status:
    """Fixed priority: failure, time, optimality+feasibility, iteration limit."""
    if state.numerical_failure:
        return Status.NUMERICAL_FAILURE
    if state.elapsed > state.time_limit:
        return Status.TIME_LIMIT
    if state.violation <= state.feas_tol and state.pg_norm <= state.grad_tol:
        return Status.CONVERGED
    if state.iteration >= state.max_iters:
        return Status.ITER_LIMIT
    return Status.RUNNING


def _blown(v: float) -> bool:
    return not math.isfinite(v) or v >= BLOWUP_PENALTY


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def fd_gradient(
    f: Callable[[np.ndarray], float],
    x,
    options: SolverOptions = SolverOptions(),
    f0: Optional[float] = None,
    lower=None,
    upper=None,
    central: bool = False,
) -> np.ndarray:
    """Finite-difference gradient with steps ``fd_step * max(1, |x_i|)``.

    Forward differences by default. A probe that would leave the bounds, or
    that blows up, is replaced by a backward step. With ``central=True`` the
    two-sided quotient is used wherever both probes stay inside the bounds,
    unless the two one-sided quotients differ by more than ``JUMP_RATIO`` in
    magnitude; then the smaller one is kept, since the other side almost
    certainly crossed a discontinuity of the rollout.
    Each coordinate owns its probes, so the result does not depend on
    evaluation order or on ``options.workers``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    if f0 is None:
        f0 = f(x)
    if _blown(f0):
        raise FloatingPointError("objective is not finite at the base point")
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=np.float64)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=np.float64)
    h = options.fd_step * np.maximum(1.0, np.abs(x))
    sign = np.where(x + h > hi, -1.0, 1.0)
    two_sided = central & (x + h <= hi) & (x - h >= lo)

    def probe(i, s):
        xp = x.copy()
        xp[i] = x[i] + s * h[i]
        return f(xp)

    jobs = [(i, sign[i]) for i in range(n)] + [(i, -1.0) for i in np.flatnonzero(two_sided)]
    vals = _map(lambda job: probe(*job), jobs, options.workers)
    back = dict(zip((i for i, _ in jobs[n:]), vals[n:]))
    grad = np.empty(n)
    retry = []
    for i, v in enumerate(vals[:n]):
        vb = back.get(i)
        if _blown(v):
            retry.append(i)
        elif vb is not None and not _blown(vb):
            fwd = (v - f0) / h[i]
            bwd = (f0 - vb) / h[i]
            lo_mag, hi_mag = sorted((abs(fwd), abs(bwd)))
            if hi_mag > JUMP_RATIO * lo_mag:
                # one side straddles a jump of the objective; keep the smooth side
                grad[i] = fwd if abs(fwd) < abs(bwd) else bwd
            else:
                grad[i] = 0.5 * (fwd + bwd)
        else:
            grad[i] = (v - f0) / (sign[i] * h[i])
    for i in retry:
        s = -sign[i]
        if (s > 0 and x[i] + h[i] > hi[i]) or (s < 0 and x[i] - h[i] < lo[i]):
            raise NonFiniteGradient(i)
        v = back[i] if i in back else probe(i, s)
        if _blown(v):
            raise NonFiniteGradient(i)
        log.debug("fd probe %d blew up; used one-sided retreat", i)
        grad[i] = (v - f0) / (s * h[i])
    return grad


def projected_gradient(x, g, lower, upper) -> np.ndarray:
    return np.clip(x - g, lower, upper) - x


def _two_loop(g, S, Y):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(S), reversed(Y)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    s, y = S[-1], Y[-1]
    q *= (s @ y) / (y @ y)
    for (s, y), a in zip(zip(S, Y), reversed(alphas)):
        rho = 1.0 / (y @ s)
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _kink_step(fun, x, fx, g, pg, lower, upper, options: SolverOptions):
    """Backtracking step along ``pg`` restricted to coordinates that descend alone.

    Each coordinate with a nonzero projected gradient is probed with a
    finite-difference sized move. Coordinates whose move raises the objective
    sit on a kink and are dropped. Returns ``(x_new, f_new, n_probes)`` where
    ``x_new`` is None when no decrease is found.
    """
    d = np.zeros_like(x)
    probes = 0
    for i in np.flatnonzero(pg):
        h = options.fd_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] = min(max(x[i] + math.copysign(h, pg[i]), lower[i]), upper[i])
        fp = fun(xp)
        probes += 1
        if not _blown(fp) and fp < fx:
            d[i] = pg[i]
    scale = float(np.max(np.abs(d))) if d.size else 0.0
    if scale == 0.0:
        return None, None, probes
    alpha = min(1.0, options.max_step / scale)
    xscale = 1.0 + float(np.max(np.abs(x)))
    while alpha * scale > 1e-15 * xscale:
        xt = np.clip(x + alpha * d, lower, upper)
        ft = fun(xt)
        probes += 1
        if not _blown(ft) and ft <= fx + options.armijo * (g @ (xt - x)):
            return xt, ft, probes
        alpha *= options.backtrack
    return None, None, probes


def solve_box_qn(
    f: Callable[[np.ndarray], float],
    x0,
    lower,
    upper,
    options: SolverOptions = SolverOptions(),
    grad: Optional[Callable[[np.ndarray, float], np.ndarray]] = None,
    deadline: Optional[float] = None,
    trace_extra: Optional[dict] = None,
) -> SolveResult:
    """Projected L-BFGS with backtracking Armijo search along the projection arc."""
    t_start = time.perf_counter()
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64).copy()
    if np.any(x < lower) or np.any(x > upper):
        raise ValueError("x0 violates the bounds")
    if deadline is None:
        deadline = t_start + options.wall_clock_limit
    n_fev = 0

    def fun(z):
        nonlocal n_fev
        n_fev += 1
        return f(z)

    def gradient(z, fz, central=False):
        nonlocal n_fev
        if grad is not None:
            return np.asarray(grad(z, fz), dtype=np.float64)
        n_fev += 2 * z.size if central else z.size
        return fd_gradient(f, z, options, f0=fz, lower=lower, upper=upper, central=central)

    fx = fun(x)
    if _blown(fx):
        raise FloatingPointError("objective is not finite at the starting point")
    g = gradient(x, fx)
    S: deque = deque(maxlen=options.memory)
    Y: deque = deque(maxlen=options.memory)
    trace = []
    it = 0
    failed = False
    refined = False
    step_norm = 0.0
    extra = trace_extra or {}

    while True:
        pg = projected_gradient(x, g, lower, upper)
        pg_norm = float(np.max(np.abs(pg))) if pg.size else 0.0
        trace.append(
            dict(extra, iteration=it, objective=fx, pg_norm=pg_norm, step_norm=step_norm, central_fd=refined)
        )
        status = check_convergence(
            IterationState(
                iteration=it,
                max_iters=options.max_inner_iters,
                pg_norm=pg_norm,
                grad_tol=options.grad_tol,
                elapsed=time.perf_counter() - t_start,
                time_limit=deadline - t_start,
                numerical_failure=failed,
            )
        )
        if status is not Status.RUNNING:
            break

        # variables held at a bound by the gradient stay fixed this iteration
        eps = 1e-12 * np.maximum(1.0, np.abs(x))
        active = ((x <= lower + eps) & (g > 0)) | ((x >= upper - eps) & (g < 0))
        free = ~active
        gf = np.where(free, g, 0.0)

        accepted = False
        for use_memory in ((True, False) if S else (False,)):
            if use_memory:
                d = _two_loop(gf, list(S), list(Y))
                d[active] = 0.0
                if not gf @ d < 0:
                    continue
                alpha = 1.0
            else:
                d = -gf
                dmax = float(np.max(np.abs(d)))
                if dmax == 0.0:
                    break
                alpha = options.initial_step / dmax
            dnorm = float(np.max(np.abs(d)))
            alpha = min(alpha, options.max_step / dnorm)
            xscale = 1.0 + float(np.max(np.abs(x)))
            while alpha * dnorm > 1e-15 * xscale:
                xt = np.clip(x + alpha * d, lower, upper)
                ft = fun(xt)
                if not _blown(ft) and ft <= fx + options.armijo * (g @ (xt - x)):
                    accepted = True
                    break
                alpha *= options.backtrack
            if accepted:
                break
            S.clear()
            Y.clear()
        if not accepted:
            if grad is None and not refined:
                # the forward quotient can be too coarse on strongly curved
                # objectives; retry the iteration once with central differences
                g = gradient(x, fx, central=True)
                refined = True
                continue
            # On a kink of the objective every direction that touches the
            # offending coordinates fails; move the remaining ones only.
            xt, ft, _ = _kink_step(fun, x, fx, g, pg, lower, upper, options)
            if xt is None:
                failed = True
                continue
        refined = False

        gt = gradient(xt, ft)
        s = xt - x
        y = gt - g
        if s @ y > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
        step_norm = float(np.max(np.abs(s)))
        x, fx, g = xt, ft, gt
        it += 1

    return SolveResult(
        x=x,
        fun=fx,
        status=status,
        inner_iters=it,
        n_fev=n_fev,
        wall_time=time.perf_counter() - t_start,
        pg_norm=pg_norm,
        trace=trace,
    )


def solve_augmented_lagrangian(
    f: Callable[[np.ndarray], float],
    constraints: Callable[[np.ndarray], np.ndarray],
    x0,
    lower,
    upper,
    options: SolverOptions = SolverOptions(),
) -> SolveResult:
    """Minimize ``f`` subject to ``constraints(x) <= 0`` and bounds."""
    t_start = time.perf_counter()
    deadline = t_start + options.wall_clock_limit
    x = np.asarray(x0, dtype=np.float64).copy()
    g0 = np.asarray(constraints(x), dtype=np.float64)
    lam = np.zeros_like(g0)
    rho = options.al_mu0
    prev_viol = math.inf
    trace: List[dict] = []
    n_fev = 1
    inner_total = 0
    status = Status.ITER_LIMIT
    pg_norm = math.inf
    outer = 0
    stalls = 0

    def merit_factory(lam, rho):
        def merit(z):
            fz = f(z)
            if _blown(fz):
                return BLOWUP_PENALTY
            gz = np.asarray(constraints(z), dtype=np.float64)
            shifted = np.maximum(0.0, lam + rho * gz)
            return fz + float(np.sum(shifted**2 - lam**2)) / (2.0 * rho)

        return merit

    while outer < options.max_outer_iters:
        merit = merit_factory(lam, rho)
        inner = solve_box_qn(
            merit, x, lower, upper, options, deadline=deadline, trace_extra=dict(outer=outer, penalty=rho)
        )
        outer += 1
        inner_total += inner.inner_iters
        # an inner solve that cannot move may still be unblocked by new
        # multipliers or a larger penalty; only repeated stalls are fatal
        if inner.status is Status.NUMERICAL_FAILURE and inner.inner_iters == 0:
            stalls += 1
        else:
            stalls = 0
        n_fev += inner.n_fev
        x = inner.x
        gx = np.asarray(constraints(x), dtype=np.float64)
        viol = float(max(0.0, np.max(gx))) if gx.size else 0.0
        pg_norm = inner.pg_norm
        for row in inner.trace:
            row["f"] = math.nan
            row["violation"] = math.nan
        if inner.trace:
            inner.trace[-1]["f"] = f(x)
            inner.trace[-1]["violation"] = viol
        trace.extend(inner.trace)
        lam = np.maximum(0.0, lam + rho * gx)
        status = check_convergence(
            IterationState(
                iteration=outer,
                max_iters=options.max_outer_iters,
                pg_norm=pg_norm,
                grad_tol=options.grad_tol,
                elapsed=time.perf_counter() - t_start,
                time_limit=options.wall_clock_limit,
                violation=viol,
                feas_tol=options.feas_tol,
                numerical_failure=stalls >= MAX_STALLS,
            )
        )
        log.info("AL outer %d: f=%.6g viol=%.3g rho=%.3g status=%s", outer, f(x), viol, rho, status.value)
        if status is not Status.RUNNING:
            break
        if viol > 0.25 * prev_viol:
            rho *= options.al_mu_growth
        prev_viol = viol

    if status is Status.RUNNING:
        status = Status.ITER_LIMIT
    gx = np.asarray(constraints(x), dtype=np.float64)
    return SolveResult(
        x=x,
        fun=f(x),
        status=status,
        inner_iters=inner_total,
        outer_iters=outer,
        n_fev=n_fev,
        wall_time=time.perf_counter() - t_start,
        max_violation=float(max(0.0, np.max(gx))) if gx.size else 0.0,
        pg_norm=pg_norm,
        multipliers=lam,
        trace=trace,
    )
