"""Experiment drivers probing the tracker's behavior empirically:
tracking-error series against reference solutions, convergence rate in the
number of primal passes, empirical contraction coefficients, feasibility
decay, and the tracking-error-versus-sampling-period study under a fixed
iteration budget.

The contraction coefficients regressed here are diagnostic surrogates: the
constants appearing in the underlying theory are existential and not
identifiable from data in any strict sense.
"""

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from . import _kernels as K
from .errors import NonConvergenceError
from .programs import PrimalDualPoint, _as_param
from .solver import TrackerConfig, TrackerState, solve_to_convergence, track_step

ERROR_FLOOR = 1e-15


# ---------------------------------------------------------------------------
# small IO helpers (atomic writes, manifests)


def atomic_write_text(path, text):
    """Write via a temp file + rename so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    atomic_write_text(path, header + "\n" + "\n".join(rows) + ("\n" if rows else ""))


def write_manifest(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# tracking error series


@dataclass
class ErrorSeries:
    """Per-step distance to the reference critical point, plus the
    parameter increments of the schedule."""

    errors: np.ndarray
    param_diffs: np.ndarray

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=np.float64)
        self.param_diffs = np.asarray(self.param_diffs, dtype=np.float64)


def oracle_continuation(prog, s_schedule, start, rho, tol=1e-8, **solver_kwargs):
    """Reference points w*_k along the schedule, each solve warm-started at
    the previous one so the locally unique branch is followed."""
    points = []
    w = start
    for s in s_schedule:
        res = solve_to_convergence(prog, w, s, rho=rho, tol=tol, **solver_kwargs)
        w = res.point
        points.append(w)
    return points


def tracking_error_series(prog, s_schedule, tracked, oracle=None, *,
                          rho, tol=1e-8, oracle_start=None, **solver_kwargs):
    """Pair each tracked iterate with the reference critical point at the
    same parameter value and return the norm series.

    When ``oracle`` is not supplied the reference points are computed by
    warm-started continuation, anchored at ``oracle_start`` (defaulting to
    the first tracked point).
    """
    s_schedule = np.atleast_2d(np.asarray(s_schedule, dtype=np.float64))
    if len(tracked) != s_schedule.shape[0]:
        raise ValueError(
            f"{len(tracked)} tracked points but {s_schedule.shape[0]} "
            f"schedule entries"
        )
    if oracle is None:
        start = oracle_start if oracle_start is not None else tracked[0]
        oracle = oracle_continuation(prog, s_schedule, start, rho, tol,
                                     **solver_kwargs)
    errors = np.array([
        w.distance_to(w_star) for w, w_star in zip(tracked, oracle)
    ])
    param_diffs = np.linalg.norm(np.diff(s_schedule, axis=0), axis=1)
    return ErrorSeries(errors, param_diffs)


def run_tracker(prog, config, w0, s_schedule):
    """Tracked points along a schedule: w_0 at s_0, then one step per
    subsequent parameter value. Returns the list of iterates (copies)."""
    s_schedule = np.atleast_2d(np.asarray(s_schedule, dtype=np.float64))
    state = TrackerState(config, w0)
    points = [state.w.copy()]
    for s in s_schedule[1:]:
        _, report = track_step(prog, state, s)
        points.append(report.w)
    return points


# ---------------------------------------------------------------------------
# rate in the number of primal passes


def psi(theta):
    """Rate exponent (1 - theta) / (2 theta - 1) for theta in (1/2, 1)."""
    theta = float(theta)
    if not 0.5 < theta < 1.0:
        raise ValueError(f"theta must lie in the open interval (1/2, 1), got {theta}")
    return (1.0 - theta) / (2.0 * theta - 1.0)


@dataclass
class RateFit:
    """Distances to the fixed-multiplier critical point for several pass
    counts M, plus the log-log least squares fit error ~ C * M^(-psi)."""

    M_values: np.ndarray
    errors: np.ndarray
    psi_hat: float
    C_hat: float

    @property
    def slope(self):
        return -self.psi_hat


def _fixed_multiplier_limit(cp, Ls, g0, z0, mu, rho, alpha, config,
                            max_sweeps=200000, disp_tol=1e-13):
    """Critical point of the penalized objective at fixed (mu, s), found by
    iterating passes from z0 until the displacement vanishes."""
    z = z0.copy()
    disp_sq = np.zeros(len(alpha))
    for _ in range(max_sweeps):
        K.sweep_direct(cp, Ls, g0, z, mu, rho, alpha,
                       config.pg_tol, config.pg_maxit, disp_sq)
        if np.sqrt(disp_sq.sum()) < disp_tol:
            return z
    raise NonConvergenceError(
        "fixed-multiplier limit did not settle", residual=float(np.sqrt(disp_sq.sum()))
    )


def rate_experiment(prog, z0, mu, s, M_values, *, rho, alpha=1e-6,
                    pg_tol=1e-10, pg_maxit=500):
    """Distance to the fixed-(mu, s) critical point after M passes, for
    each M, with a log-log fit of the decay."""
    M_values = np.asarray(list(M_values), dtype=np.int64)
    if M_values.size < 3:
        raise ValueError(f"need at least 3 values of M, got {M_values.size}")
    if np.any(np.diff(M_values) <= 0):
        raise ValueError("M values must be strictly increasing")
    cfg = TrackerConfig(rho=rho, M=1, alpha=alpha, path="direct",
                        pg_tol=pg_tol, pg_maxit=pg_maxit)
    cp = prog.compiled()
    Ls, g0 = K.freeze_parameter(cp, _as_param(prog, s))
    alpha_vec = cfg.alpha_for(prog)
    z0 = np.asarray(z0, dtype=np.float64).ravel().copy()
    mu = np.asarray(mu, dtype=np.float64).ravel()

    z_limit = _fixed_multiplier_limit(cp, Ls, g0, z0, mu, rho, alpha_vec, cfg)
    errors = np.empty(M_values.size)
    disp_sq = np.zeros(len(alpha_vec))
    for idx, M in enumerate(M_values):
        z = z0.copy()
        for _ in range(int(M)):
            K.sweep_direct(cp, Ls, g0, z, mu, rho, alpha_vec,
                           cfg.pg_tol, cfg.pg_maxit, disp_sq)
        errors[idx] = np.linalg.norm(z - z_limit)

    logs = np.log(np.maximum(errors, ERROR_FLOOR))
    slope, intercept = np.polyfit(np.log(M_values.astype(float)), logs, 1)
    return RateFit(M_values, errors, psi_hat=-float(slope),
                   C_hat=float(np.exp(intercept)))


# ---------------------------------------------------------------------------
# empirical contraction coefficients


@dataclass
class ContractionCell:
    rho: float
    M: int
    beta_w: float
    beta_s: float
    residual: float
    degenerate: bool = False
    drift_identifiable: bool = True


def contraction_probe(prog, s_schedule, w0, rho_grid, M_grid, *,
                      alpha=1e-6, path="lifted", oracle_rho=None,
                      oracle_tol=1e-9, degenerate_tol=1e-11, workers=1):
    """Nonnegative least squares fit of
    e_{k+1} ~ beta_w e_k + beta_s ||s_{k+1} - s_k|| over a tracked run,
    for every (rho, M) cell. Cells with vanishing errors are flagged
    degenerate rather than failed; a zero-drift schedule flags beta_s as
    unidentifiable. Cells are independent and may run on several threads
    (workers > 1); results are ordered by (rho, M) either way."""
    rho_grid = list(rho_grid)
    M_grid = list(M_grid)
    if not rho_grid or not M_grid:
        raise ValueError("rho and M grids must be nonempty")
    s_schedule = np.atleast_2d(np.asarray(s_schedule, dtype=np.float64))
    ds = np.linalg.norm(np.diff(s_schedule, axis=0), axis=1)

    oracle = oracle_continuation(
        prog, s_schedule, w0, rho=oracle_rho or max(rho_grid), tol=oracle_tol
    )

    def run_cell(cell_key):
        rho, M = cell_key
        cfg = TrackerConfig(rho=rho, M=M, alpha=alpha, path=path)
        tracked = run_tracker(prog, cfg, w0, s_schedule)
        series = tracking_error_series(
            prog, s_schedule, tracked, oracle=oracle, rho=rho
        )
        e = series.errors
        if e.max() < degenerate_tol:
            return ContractionCell(rho, M, np.nan, np.nan, 0.0, degenerate=True)
        drift_ok = ds.max() > 1e-14
        if drift_ok:
            A = np.column_stack([e[:-1], ds])
            coef, resid = nnls(A, e[1:])
            beta_w, beta_s = float(coef[0]), float(coef[1])
        else:
            A = e[:-1].reshape(-1, 1)
            coef, resid = nnls(A, e[1:])
            beta_w, beta_s = float(coef[0]), np.nan
        return ContractionCell(rho, M, beta_w, beta_s, float(resid),
                               drift_identifiable=drift_ok)

    keys = [(rho, M) for rho in rho_grid for M in M_grid]
    return _map_cells(run_cell, keys, workers)


def _map_cells(fn, keys, workers):
    """Deterministically ordered map over independent cells, optionally on
    a thread pool."""
    if workers <= 1 or len(keys) <= 1:
        return [fn(k) for k in keys]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, keys))


def drift_schedule(s0, drift, steps, direction=None):
    """Schedule s_k = s0 + k * drift * unit(direction)."""
    s0 = np.atleast_1d(np.asarray(s0, dtype=np.float64))
    if direction is None:
        direction = np.ones_like(s0)
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    return s0[None, :] + drift * np.arange(steps)[:, None] * direction[None, :]


# ---------------------------------------------------------------------------
# sampling-period sweep under a fixed iteration budget


@dataclass
class DtCell:
    dt: float
    M_per_step: int
    nl2_error: float
    infeasible: bool = False
    oracle_converged: bool = True


def normalized_l2(traj, ref_traj):
    """||traj - ref|| / ||ref||; scale-invariant under joint scaling."""
    traj = np.asarray(traj, dtype=np.float64)
    ref_traj = np.asarray(ref_traj, dtype=np.float64)
    denom = np.linalg.norm(ref_traj)
    if denom == 0.0:
        return float(np.linalg.norm(traj - ref_traj))
    return float(np.linalg.norm(traj - ref_traj) / denom)


def _lenient_oracle_trace(spec, x0, references, steps, tol, rho, path, alpha):
    """Reference closed loop that accepts the best-so-far point when a step
    fails to converge (used only inside dt_sweep, where late cells probe
    regimes the reference solver cannot crack either)."""
    from .nmpc import (
        _ProgramCache, _full_references, first_input, rollout_initial_point,
        simulate_plant,
    )
    refs_full, _ = _full_references(spec, references, steps, 1)
    cache = _ProgramCache(spec)
    x = np.asarray(x0, dtype=np.float64).ravel()
    warm = rollout_initial_point(spec, x)
    xs = np.empty((steps, spec.model.n))
    converged = True
    for k in range(steps):
        prog = cache.get(refs_full[k])
        xs[k] = x
        try:
            res = solve_to_convergence(prog, warm, x, rho=rho, tol=tol,
                                       path=path, alpha=alpha)
            warm = res.point
        except NonConvergenceError as exc:
            warm = exc.point
            converged = False
        u = first_input(spec, warm)
        x = simulate_plant(spec.model, x, u)
    return xs, converged


def dt_sweep(spec_factory, budget, dt_grid, sim_seconds, x0, *,
             rho=50.0, alpha=1e-6, ref_amplitude=2.0, ref_period=2.0,
             oracle_tol=1e-6, speed_only=True, state_index=1,
             warm_inflation=5.0, workers=1):
    """Tracking error versus sampling period at fixed compute.

    For each dt the tracker gets M = floor(budget * dt / P) passes per
    step; the tracked and reference closed loops run over sim_seconds and
    the normalized L2 distance between their speed trajectories is
    reported. dts whose budget allows no pass are flagged infeasible.
    """
    from .nmpc import run_closed_loop, square_wave

    if not budget > 0:
        raise ValueError(f"budget must be positive, got {budget}")
    for dt in dt_grid:
        if not 0 < dt <= 0.1:
            raise ValueError(f"dt grid values must lie in (0, 0.1], got {dt}")

    def run_cell(dt):
        spec = spec_factory(dt)
        prog_blocks = 2
        M = int(np.floor(budget * dt / prog_blocks))
        if M < 1:
            return DtCell(float(dt), 0, np.nan, infeasible=True)
        steps = max(1, int(round(sim_seconds / dt)))
        refs = square_wave(steps, dt, ref_amplitude, ref_period)
        oracle_x, converged = _lenient_oracle_trace(
            spec, x0, refs, steps, oracle_tol, rho, "lifted", alpha
        )
        cfg = TrackerConfig(rho=rho, M=M, alpha=alpha, path="lifted")
        trace = run_closed_loop(spec, cfg, x0, refs, steps,
                                warm_inflation=warm_inflation,
                                oracle_tol=oracle_tol)
        if speed_only:
            err = normalized_l2(trace.x[:, state_index], oracle_x[:, state_index])
        else:
            err = normalized_l2(trace.x, oracle_x)
        return DtCell(float(dt), M, err, oracle_converged=converged)

    return _map_cells(run_cell, list(dt_grid), workers)


def feasibility_series(trace):
    """The per-step constraint violation norms of a closed-loop trace."""
    if len(trace) == 0:
        raise ValueError("trace is empty")
    return np.array(trace.feasibility, copy=True)
