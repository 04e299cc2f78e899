"""Numerical engines: damped Newton-Raphson and the trapezoidal time loop.

The Newton update is z <- z + alpha * dz with dz = lu_solve(J, -r). By
default alpha additionally halves (up to four times) whenever a step would
increase the residual norm; setting adaptive_damping=False reproduces the
plain constant-alpha iteration exactly. Trial points that trip a device
guard (diode overflow, voltage collapse) count as "worse" and trigger the
same halving, which is what lets a cold-started exponential device survive
its first few iterations.

fd_jacobian is the one-stop independent oracle: every analytic Jacobian in
the package (devices, macromodels, assembled systems) is tested against it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import graybox
from .errors import (
    DeviceError,
    NonConvergenceError,
    OverflowGuardError,
    SingularJacobianError,
    SingularMatrixError,
    VoltageCollapseError,
)
from .linalg import inf_norm, lu_solve


@dataclass
class SolverConfig:
    alpha: float = 1.0
    epsilon: float = 1e-6
    max_iter: int = 100
    fallback: str = "best_iterate"  # or "fail"
    adaptive_damping: bool = True
    max_halvings: int = 4

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.fallback not in ("fail", "best_iterate"):
            raise ValueError(f"unknown fallback {self.fallback!r}")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual_history: list[float]
    final_residual_norm: float
    wall_time: float


@dataclass
class TimeSeries:
    """Uniformly spaced transient solution, one state row per time point."""

    times: np.ndarray
    states: np.ndarray
    reports: list[SolveReport] = field(default_factory=list)
    aborted_at: float | None = None
    abort_reason: str = ""

    @property
    def completed(self) -> bool:
        return self.aborted_at is None


def _guard_tripped(exc: DeviceError) -> bool:
    return isinstance(exc.cause, (OverflowGuardError, VoltageCollapseError))


def _newton(fun, z0, cfg: SolverConfig):
    """Damped NR on a residual/Jacobian callback fun(z, with_jacobian)."""
    start = time.perf_counter()
    z = np.asarray(z0, dtype=float).copy()
    r, jac = fun(z, True)
    norm = inf_norm(r)
    history = [norm]
    best = (z.copy(), norm)
    iterations = 0

    while not (norm <= cfg.epsilon):  # NaN must iterate/fail, never "converge"
        if not np.isfinite(norm):
            report = SolveReport(False, iterations, history, norm,
                                 time.perf_counter() - start)
            raise NonConvergenceError(
                f"residual became non-finite at iteration {iterations}",
                report=report,
            )
        if iterations >= cfg.max_iter:
            report = SolveReport(False, iterations, history, norm,
                                 time.perf_counter() - start)
            if cfg.fallback == "fail":
                raise NonConvergenceError(
                    f"no convergence after {iterations} iterations "
                    f"(residual {norm:.3e} > {cfg.epsilon:g})",
                    report=report,
                )
            return best[0], report

        try:
            delta = lu_solve(jac, -r)
        except SingularMatrixError as exc:
            raise SingularJacobianError(iterations, exc) from exc

        if cfg.adaptive_damping:
            step = cfg.alpha
            chosen = None
            last_error = None
            for halving in range(cfg.max_halvings + 1):
                z_try = z + step * delta
                try:
                    n_try = inf_norm(fun(z_try, False)[0])
                    if not np.isfinite(n_try):
                        n_try = None  # out-of-domain trial: treat like a guard
                except DeviceError as exc:
                    if not _guard_tripped(exc):
                        raise
                    last_error = exc
                    n_try = None
                if n_try is not None:
                    chosen = z_try
                    if n_try < norm:
                        break
                step *= 0.5
            if chosen is None:
                if last_error is not None:
                    raise last_error
                raise NonConvergenceError(
                    f"every damped trial at iteration {iterations} left the "
                    f"devices' domain",
                    report=SolveReport(False, iterations, history, norm,
                                       time.perf_counter() - start),
                )
            z = chosen
        else:
            z = z + cfg.alpha * delta

        r, jac = fun(z, True)
        norm = inf_norm(r)
        history.append(norm)
        iterations += 1
        if norm < best[1]:
            best = (z.copy(), norm)

    return z, SolveReport(True, iterations, history, norm,
                          time.perf_counter() - start)


def nr_solve(sys: graybox.GrayBoxSystem, z0, u=None, cfg: SolverConfig | None = None,
             hist=None, self_consistent_history=False):
    """Solve the steady-state system from iterate z0. Returns (z, report)."""
    cfg = cfg or SolverConfig()

    def fun(z, with_jacobian):
        return graybox.assemble_algebraic(
            sys, z, u, hist=hist, with_jacobian=with_jacobian,
            self_consistent_history=self_consistent_history,
        )

    return _newton(fun, z0, cfg)


def solve_dc(sys: graybox.GrayBoxSystem, u=None, cfg: SolverConfig | None = None,
             z0=None):
    """Operating-point solve; returns (z, report, hist).

    History-fed macromodels are solved in their steady-state form (the
    lagged input equals the output), so the returned hist is ready to seed a
    transient run from this operating point.
    """
    cfg = cfg or SolverConfig()
    z = sys.flat_start() if z0 is None else np.asarray(z0, dtype=float).copy()
    sc = sys.has_history_devices()
    z, report = nr_solve(sys, z, u, cfg, self_consistent_history=sc)
    hist = graybox.history_fixed_point(sys, z, u) if not sc else None
    if sc:
        st = graybox._run_stamps(sys, *sys._check_z_u(z, u), {},
                                 with_jacobian=False, self_consistent=True)
        hist = st.neural_outputs
    return z, report, hist


def _schedule_fn(u_schedule):
    if u_schedule is None:
        return lambda t: np.zeros(0)
    if callable(u_schedule):
        return u_schedule
    if isinstance(u_schedule, np.ndarray) and u_schedule.ndim == 1:
        return lambda t: u_schedule
    entries = sorted(
        ((float(t), np.asarray(v, dtype=float)) for t, v in u_schedule),
        key=lambda e: e[0],
    )
    if not entries:
        return lambda t: np.zeros(0)

    def at(t):
        current = entries[0][1]
        for t_k, v_k in entries:
            if t_k <= t + 1e-15:
                current = v_k
            else:
                break
        return current

    return at


def transient_solve(sys: graybox.GrayBoxSystem, z_init, u_schedule, t_end, dt,
                    cfg: SolverConfig | None = None, hist0=None) -> TimeSeries:
    """Trapezoidal time march from z_init. The schedule is piecewise constant.

    Each step reuses the previous accepted step's cached evaluations and runs
    an inner Newton iteration at the new time point. A step that fails to
    converge aborts the march; the partial series is returned with the
    failure time and reason attached.
    """
    cfg = cfg or SolverConfig()
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end < dt:
        raise ValueError("t_end must cover at least one step")
    u_at = _schedule_fn(u_schedule)
    n_steps = int(round(t_end / dt))

    u0 = u_at(0.0)
    if hist0 is None and sys.has_history_devices():
        hist0 = graybox.history_fixed_point(sys, z_init, u0)
    state = graybox.TransientState.at(sys, z_init, u0, 0.0, hist=hist0)

    times = [0.0]
    states = [state.z.copy()]
    reports: list[SolveReport] = []
    aborted_at = None
    reason = ""

    for k in range(n_steps):
        t_new = (k + 1) * dt
        u_new = u_at(t_new)

        def fun(z, with_jacobian, _state=state, _u=u_new):
            return graybox.assemble_trapezoidal(sys, _state, z, _u, dt,
                                                with_jacobian=with_jacobian)

        try:
            z_new, report = _newton(fun, state.z, cfg)
        except NonConvergenceError as exc:
            aborted_at, reason = t_new, str(exc)
            if exc.report is not None:
                reports.append(exc.report)
            break
        reports.append(report)
        if not report.converged:
            aborted_at = t_new
            reason = (f"step to t={t_new:g} stalled at residual "
                      f"{report.final_residual_norm:.3e}")
            break
        state = graybox.TransientState.at(sys, z_new, u_new, t_new, hist=state.hist)
        times.append(t_new)
        states.append(state.z.copy())

    return TimeSeries(
        times=np.asarray(times),
        states=np.asarray(states),
        reports=reports,
        aborted_at=aborted_at,
        abort_reason=reason,
    )


def fd_jacobian(residual_fn, z, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of residual_fn at z, column by column.

    The step for column j is h * (1 + |z_j|). This is the independent
    reference every analytic Jacobian in the package is checked against;
    keep it free of any shared code with the analytic paths.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    z = np.asarray(z, dtype=float)
    r0 = np.asarray(residual_fn(z), dtype=float)
    jac = np.zeros((r0.shape[0], z.shape[0]))
    for j in range(z.shape[0]):
        step = h * (1.0 + abs(z[j]))
        zp = z.copy()
        zp[j] += step
        zm = z.copy()
        zm[j] -= step
        rp = np.asarray(residual_fn(zp), dtype=float)
        rm = np.asarray(residual_fn(zm), dtype=float)
        jac[:, j] = (rp - rm) / (2.0 * step)
    return jac
