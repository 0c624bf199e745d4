"""NMPC for constrained bilinear models on top of the splitting tracker.

The horizon problem is condensed into a two-block multi-convex program:
block 0 stacks the predicted states (x_1..x_N), block 1 stacks the inputs
(u_0..u_{N-1}); the dynamics rows are bilinear in (states, inputs) and the
current plant state enters as the parameter. Projection onto the input box
at every primal pass makes the applied input feasible by construction.

Includes the DC-motor benchmark model (armature current / angular speed
states, field current input, Euler discretization).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ModelError, NonConvergenceError, NumericsError, OptrackError
from .programs import (
    BilinearConstraint,
    BlockLayout,
    BlockVector,
    Box,
    ConstraintRow,
    MultiConvexProgram,
    PrimalDualPoint,
    QuadraticObjective,
)
from .solver import TrackerState, solve_to_convergence, track_step

# DC motor parameters (armature inductance/resistance, torque constant,
# rotor inertia, viscous friction, load torque, armature voltage)
DC_LA = 0.307
DC_RA = 12.548
DC_KM = 0.22567
DC_J = 0.00385
DC_B = 0.00783
DC_TAU_L = 1.47
DC_UA = 60.0

PSD_TOL = 1e-10


@dataclass
class BilinearModel:
    """Discrete-time plant x+ = A x + B u + sum_i u^(i) N_i x + c with box
    bounds on states and inputs."""

    A: np.ndarray
    B: np.ndarray
    N: list
    c: np.ndarray
    x_lower: np.ndarray
    x_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ModelError(f"A must be square, got {self.A.shape}")
        self.B = np.asarray(self.B, dtype=np.float64).reshape(n, -1)
        m_u = self.B.shape[1]
        self.N = [np.asarray(Ni, dtype=np.float64) for Ni in self.N]
        if len(self.N) != m_u:
            raise ModelError(
                f"need one N matrix per input ({m_u}), got {len(self.N)}"
            )
        for i, Ni in enumerate(self.N):
            if Ni.shape != (n, n):
                raise ModelError(f"N[{i}] has shape {Ni.shape}, expected {(n, n)}")
        self.c = np.asarray(self.c, dtype=np.float64).ravel()
        if self.c.shape[0] != n:
            raise DimensionError(f"c has length {self.c.shape[0]}, expected {n}")
        self.x_lower = np.asarray(self.x_lower, dtype=np.float64).ravel()
        self.x_upper = np.asarray(self.x_upper, dtype=np.float64).ravel()
        self.u_lower = np.asarray(self.u_lower, dtype=np.float64).ravel()
        self.u_upper = np.asarray(self.u_upper, dtype=np.float64).ravel()
        if self.x_lower.shape[0] != n or self.x_upper.shape[0] != n:
            raise DimensionError("state bounds must have the state dimension")
        if self.u_lower.shape[0] != m_u or self.u_upper.shape[0] != m_u:
            raise DimensionError("input bounds must have the input dimension")
        if np.any(self.x_lower > self.x_upper) or np.any(self.u_lower > self.u_upper):
            raise ModelError("bounds must be ordered (lower <= upper)")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m_u(self):
        return self.B.shape[1]


def simulate_plant(model, x, u):
    """One plant step A x + B u + sum_i u^(i) N_i x + c (bounds are not
    enforced here; the plant is the physics)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    u = np.asarray(u, dtype=np.float64).ravel()
    if x.shape[0] != model.n:
        raise DimensionError(f"state has length {x.shape[0]}, expected {model.n}")
    if u.shape[0] != model.m_u:
        raise DimensionError(f"input has length {u.shape[0]}, expected {model.m_u}")
    nxt = model.A @ x + model.B @ u + model.c
    for i in range(model.m_u):
        nxt += u[i] * (model.N[i] @ x)
    return nxt


def dc_motor_model(dt):
    """Euler-discretized DC motor at sampling period dt (seconds).

    States: armature current [A], angular speed [rad/s]; the single input
    (field current) multiplies the state, so the model is bilinear.
    """
    if not 0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    A = np.array([
        [1.0 - DC_RA * dt / DC_LA, 0.0],
        [0.0, 1.0 - DC_B * dt / DC_J],
    ])
    N1 = np.array([
        [0.0, -DC_KM * dt / DC_LA],
        [DC_KM * dt / DC_J, 0.0],
    ])
    c = dt * np.array([DC_UA / DC_LA, -DC_TAU_L / DC_J])
    return BilinearModel(
        A=A, B=np.zeros((2, 1)), N=[N1], c=c,
        x_lower=np.array([-2.0, -8.0]), x_upper=np.array([5.0, 1.5]),
        u_lower=np.array([1.27]), u_upper=np.array([1.4]),
    )


# ---------------------------------------------------------------------------
# horizon problem


def _check_psd(M, name, strict=False):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ModelError(f"{name} must be square, got shape {M.shape}")
    lo = np.linalg.eigvalsh(0.5 * (M + M.T))[0]
    bound = PSD_TOL * max(1.0, np.abs(M).max())
    if strict and lo <= bound:
        raise ModelError(f"{name} must be positive definite")
    if not strict and lo < -bound:
        raise ModelError(f"{name} must be positive semidefinite")
    return 0.5 * (M + M.T)


@dataclass
class NmpcSpec:
    """Horizon problem data: model, sampling period, horizon, quadratic
    stage weights, reference, terminal weight and terminal box."""

    model: BilinearModel
    dt: float
    horizon: int
    Q: np.ndarray
    R: np.ndarray
    reference: np.ndarray
    Qf: np.ndarray = None
    terminal_set: Box = None

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ModelError(f"horizon must be >= 1, got {self.horizon}")
        self.horizon = int(self.horizon)
        n = self.model.n
        self.Q = _check_psd(self.Q, "Q")
        self.R = _check_psd(self.R, "R", strict=True)
        if self.Qf is None:
            self.Qf = self.Q.copy()
        self.Qf = _check_psd(self.Qf, "Qf")
        if self.Q.shape[0] != n or self.Qf.shape[0] != n:
            raise DimensionError("Q/Qf must match the state dimension")
        if self.R.shape[0] != self.model.m_u:
            raise DimensionError("R must match the input dimension")
        self.reference = np.asarray(self.reference, dtype=np.float64)
        if self.reference.ndim == 1:
            if self.reference.shape[0] != n:
                raise DimensionError("reference must have the state dimension")
        elif self.reference.shape != (self.horizon, n):
            raise DimensionError(
                f"per-stage reference must have shape {(self.horizon, n)}"
            )
        if self.terminal_set is None:
            self.terminal_set = Box(self.model.x_lower, self.model.x_upper)
        if self.terminal_set.dim != n:
            raise DimensionError("terminal set must have the state dimension")

    def stage_references(self):
        """References for stages 1..N as an (N, n) array."""
        if self.reference.ndim == 1:
            return np.tile(self.reference, (self.horizon, 1))
        return np.array(self.reference, copy=True)


def _nmpc_objective(spec):
    model, N = spec.model, spec.horizon
    n, m_u = model.n, model.m_u
    nx, nu = n * N, m_u * N
    refs = spec.stage_references()
    H = np.zeros((nx + nu, nx + nu))
    h = np.zeros(nx + nu)
    c0 = 0.0
    for l in range(1, N + 1):
        W = spec.Q if l < N else spec.Qf
        r = refs[l - 1]
        sl = slice((l - 1) * n, l * n)
        H[sl, sl] = 2.0 * W
        h[sl] = -2.0 * (W @ r)
        c0 += float(r @ (W @ r))
    for l in range(N):
        sl = slice(nx + l * m_u, nx + (l + 1) * m_u)
        H[sl, sl] = 2.0 * spec.R
    return QuadraticObjective(H, h, c0)


def build_nmpc_program(spec):
    """Condense the horizon problem into a two-block program.

    Block 0 = (x_1..x_N), block 1 = (u_0..u_{N-1}); m = n*N dynamics rows;
    the current state enters the constraint as the parameter (additively
    through S for the l=0 state term, bilinearly with u_0 for the l=0
    coupling term). State boxes are intersected with the terminal box at
    the last stage.
    """
    model, N = spec.model, spec.horizon
    n, m_u = model.n, model.m_u
    layout = BlockLayout([n * N, m_u * N])
    m = n * N

    S = np.zeros((m, n))
    t = np.zeros(m)
    rows = []
    for l in range(N):
        for r in range(n):
            row = ConstraintRow()
            xl_next = np.zeros(n * N)
            xl_next[l * n + r] = 1.0
            lin_x = xl_next
            if l >= 1:
                lin_x = xl_next.copy()
                lin_x[(l - 1) * n: l * n] -= model.A[r]
            lin_u = np.zeros(m_u * N)
            lin_u[l * m_u: (l + 1) * m_u] = -model.B[r]
            row.linear = {0: lin_x, 1: lin_u}
            if l >= 1:
                Qp = np.zeros((n * N, m_u * N))
                for i in range(m_u):
                    Qp[(l - 1) * n: l * n, l * m_u + i] = -model.N[i][r]
                row.pairs = {(0, 1): Qp}
            else:
                C = np.zeros((m_u * N, n))
                for i in range(m_u):
                    C[i] = -model.N[i][r]
                row.couplings = {1: C}
                S[r] = -model.A[r]
            t[l * n + r] = -model.c[r]
            rows.append(row)

    x_lo = np.tile(model.x_lower, N)
    x_hi = np.tile(model.x_upper, N)
    x_lo[(N - 1) * n:] = np.maximum(model.x_lower, spec.terminal_set.lower)
    x_hi[(N - 1) * n:] = np.minimum(model.x_upper, spec.terminal_set.upper)
    if np.any(x_lo > x_hi):
        raise ModelError(
            "terminal box intersected with the state box is empty"
        )
    sets = [
        Box(x_lo, x_hi),
        Box(np.tile(model.u_lower, N), np.tile(model.u_upper, N)),
    ]
    return MultiConvexProgram(layout, _nmpc_objective(spec), BilinearConstraint(rows, S, t), sets)


def with_reference(prog, spec, reference):
    """Program for a different reference: same constraint/sets, new
    objective vectors (the compiled constraint tensors are shared)."""
    new_spec = NmpcSpec(
        model=spec.model, dt=spec.dt, horizon=spec.horizon, Q=spec.Q,
        R=spec.R, reference=reference, Qf=spec.Qf,
        terminal_set=spec.terminal_set,
    )
    return prog.with_objective(_nmpc_objective(new_spec)), new_spec


def first_input(spec, w):
    """First planned input u_0 from a primal-dual point of the condensed
    program."""
    nx = spec.model.n * spec.horizon
    return np.array(w.z.data[nx: nx + spec.model.m_u], copy=True)


def rollout_initial_point(spec, x0):
    """Cheap feasible-ish starting point: roll the plant out under the
    midpoint input (clipping states into their boxes) and pair it with a
    zero multiplier."""
    model, N = spec.model, spec.horizon
    u_lo, u_hi = model.u_lower, model.u_upper
    u_mid = np.where(
        np.isfinite(u_lo) & np.isfinite(u_hi), 0.5 * (u_lo + u_hi),
        np.where(np.isfinite(u_lo), u_lo, np.where(np.isfinite(u_hi), u_hi, 0.0)),
    )
    xs = []
    x = np.asarray(x0, dtype=np.float64).ravel()
    for _ in range(N):
        x = simulate_plant(model, x, u_mid)
        xs.append(np.clip(x, model.x_lower, model.x_upper))
        x = xs[-1]
    z = np.concatenate([np.concatenate(xs), np.tile(u_mid, N)])
    prog_layout = BlockLayout([model.n * N, model.m_u * N])
    return PrimalDualPoint(BlockVector(prog_layout, z), np.zeros(model.n * N))


# ---------------------------------------------------------------------------
# closed-loop drivers


@dataclass
class ClosedLoopTrace:
    """Per-step record of a closed-loop run.

    x[k] is the plant state when step k starts (also the parameter s_k fed
    to the solver), u[k] the applied input. Failed solver steps hold the
    previous input and are listed in error_steps (their feasibility/KKT
    entries are NaN).
    """

    dt: float
    x: np.ndarray
    u: np.ndarray
    s: np.ndarray
    ref: np.ndarray
    feasibility: np.ndarray
    kkt_residual: np.ndarray
    solve_ms: np.ndarray
    error_steps: list = field(default_factory=list)

    CSV_BASE = "k,t_seconds"

    def __len__(self):
        return self.x.shape[0]

    def csv_header(self):
        n = self.x.shape[1]
        m_u = self.u.shape[1]
        xs = ",".join(f"x{i + 1}" for i in range(n))
        us = "u" if m_u == 1 else ",".join(f"u{i + 1}" for i in range(m_u))
        return f"{self.CSV_BASE},{xs},{us},ref,feasibility,kkt_residual,solve_ms"

    def csv_rows(self):
        ref = self.ref if self.ref.ndim == 1 else self.ref[:, 0]
        for k in range(len(self)):
            cells = [str(k), repr(k * self.dt)]
            cells += [repr(v) for v in self.x[k]]
            cells += [repr(v) for v in self.u[k]]
            cells.append(repr(float(ref[k])))
            cells.append(repr(float(self.feasibility[k])))
            cells.append(repr(float(self.kkt_residual[k])))
            cells.append(repr(float(self.solve_ms[k])))
            yield ",".join(cells)

    def write_csv(self, path):
        from .experiments import atomic_write_text
        text = self.csv_header() + "\n" + "\n".join(self.csv_rows()) + "\n"
        atomic_write_text(path, text)


def _full_references(spec, references, steps, ref_index):
    """Per-step reference vectors (steps, n) from scalars or full rows."""
    base = spec.reference if spec.reference.ndim == 1 else spec.reference[0]
    refs = np.asarray(references, dtype=np.float64)
    if refs.ndim == 0:
        refs = np.full(steps, float(refs))
    if refs.ndim == 1:
        if refs.shape[0] != steps:
            raise DimensionError(
                f"need one reference per step ({steps}), got {refs.shape[0]}"
            )
        out = np.tile(base, (steps, 1))
        out[:, ref_index] = refs
        return out, refs
    if refs.shape != (steps, spec.model.n):
        raise DimensionError(
            f"per-step references must have shape {(steps, spec.model.n)}"
        )
    return np.array(refs, copy=True), refs[:, ref_index]


class _ProgramCache:
    """Programs keyed by reference vector; objective swaps share the
    compiled constraint."""

    def __init__(self, spec):
        self.spec = spec
        self.base = build_nmpc_program(spec)
        self._cache = {}

    def get(self, ref_vec):
        key = ref_vec.tobytes()
        if key not in self._cache:
            prog, _ = with_reference(self.base, self.spec, ref_vec)
            self._cache[key] = prog
        return self._cache[key]


def run_closed_loop(spec, config, x0, references, steps, warm=None,
                    ref_index=1, warm_inflation=5.0, oracle_tol=1e-8):
    """Tracked closed loop: per step, feed the plant state in as the
    parameter, advance the tracker once, apply the first planned input.

    The warm start defaults to warm_inflation times the reference solution
    at the initial state (pass ``warm`` to override). Solver errors hold
    the previous input and flag the step rather than aborting.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    model = spec.model
    refs_full, refs_scalar = _full_references(spec, references, steps, ref_index)
    cache = _ProgramCache(spec)
    x = np.asarray(x0, dtype=np.float64).ravel()

    if warm is None:
        prog0 = cache.get(refs_full[0])
        res = solve_to_convergence(
            prog0, rollout_initial_point(spec, x), x, rho=config.rho,
            tol=oracle_tol, path=config.path, alpha=config.alpha,
        )
        warm = res.point
        warm.z.data *= warm_inflation
        warm.mu *= warm_inflation
    state = TrackerState(config, warm)

    n, m_u = model.n, model.m_u
    xs = np.empty((steps, n))
    us = np.empty((steps, m_u))
    feas = np.full(steps, np.nan)
    kkt = np.full(steps, np.nan)
    ms = np.zeros(steps)
    error_steps = []
    u_prev = np.where(
        np.isfinite(model.u_lower) & np.isfinite(model.u_upper),
        0.5 * (model.u_lower + model.u_upper), 0.0,
    )
    for k in range(steps):
        prog = cache.get(refs_full[k])
        xs[k] = x
        t0 = time.perf_counter()
        try:
            _, report = track_step(prog, state, x)
            u = first_input(spec, state.w)
            feas[k] = report.feasibility
            kkt[k] = report.kkt_residual
        except (NumericsError, NonConvergenceError):
            u = u_prev
            error_steps.append(k)
        ms[k] = 1e3 * (time.perf_counter() - t0)
        us[k] = u
        u_prev = u
        x = simulate_plant(model, x, u)
    return ClosedLoopTrace(
        dt=spec.dt, x=xs, u=us, s=xs.copy(), ref=refs_scalar,
        feasibility=feas, kkt_residual=kkt, solve_ms=ms,
        error_steps=error_steps,
    )


def run_oracle_loop(spec, x0, references, steps, tol=1e-8, rho=50.0,
                    ref_index=1, max_outer=200, path="lifted", alpha=1e-6):
    """Closed loop where every step is solved to convergence (the
    full-accuracy reference trajectory). Aborts on non-convergence, naming
    the step."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    model = spec.model
    refs_full, refs_scalar = _full_references(spec, references, steps, ref_index)
    cache = _ProgramCache(spec)
    x = np.asarray(x0, dtype=np.float64).ravel()
    warm = rollout_initial_point(spec, x)

    n, m_u = model.n, model.m_u
    xs = np.empty((steps, n))
    us = np.empty((steps, m_u))
    feas = np.empty(steps)
    kkt = np.empty(steps)
    ms = np.zeros(steps)
    lifted_state = None
    for k in range(steps):
        prog = cache.get(refs_full[k])
        xs[k] = x
        t0 = time.perf_counter()
        try:
            res = solve_to_convergence(
                prog, warm, x, rho=rho, tol=tol, max_outer=max_outer,
                path=path, alpha=alpha, warm_lifted=lifted_state,
            )
        except NonConvergenceError as exc:
            raise NonConvergenceError(
                f"reference loop failed to converge at step {k}: {exc}",
                point=exc.point, residual=exc.residual,
                outer_iterations=exc.outer_iterations,
            ) from exc
        ms[k] = 1e3 * (time.perf_counter() - t0)
        warm = res.point
        lifted_state = res.lifted_state
        u = first_input(spec, warm)
        us[k] = u
        feas[k] = float(np.linalg.norm(
            _constraint_at(prog, warm, x)))
        kkt[k] = res.residual
        x = simulate_plant(model, x, u)
    return ClosedLoopTrace(
        dt=spec.dt, x=xs, u=us, s=xs.copy(), ref=refs_scalar,
        feasibility=feas, kkt_residual=kkt, solve_ms=ms,
    )


def _constraint_at(prog, w, s):
    from .programs import evaluate_constraint
    return evaluate_constraint(prog, w.z, s)


def square_wave(steps, dt, amplitude=2.0, period=2.0, start_sign=1.0):
    """Piecewise-constant +/- amplitude reference with the given period in
    seconds."""
    t = np.arange(steps) * dt
    sign = np.where((t % period) < 0.5 * period, start_sign, -start_sign)
    return amplitude * sign


def default_dc_motor_spec(dt, horizon=None, q_speed=1.0, r_input=0.1,
                          preview_seconds=0.26):
    """DC-motor spec with the default tuning: speed-error stage cost,
    small input weight, terminal weight equal to the stage weight,
    terminal box equal to the state box, horizon covering about
    preview_seconds of lookahead."""
    model = dc_motor_model(dt)
    if horizon is None:
        horizon = max(1, round(preview_seconds / dt))
    return NmpcSpec(
        model=model, dt=dt, horizon=horizon,
        Q=np.diag([0.0, q_speed]), R=np.array([[r_input]]),
        reference=np.array([0.0, 2.0]),
    )
