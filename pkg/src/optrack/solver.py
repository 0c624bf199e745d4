"""Truncated augmented-Lagrangian splitting solver.

One tracking step at parameter value s consists of M proximal Gauss-Seidel
passes over the blocks of the penalized objective

    L_rho(z, mu, s) = f(z) + (mu + rho/2 g(z, s))^T g(z, s),

each block update solving its strongly convex subproblem exactly, followed
by a single dual ascent update mu <- mu + rho g(z, s). Two equivalent
primal passes are provided:

* direct: each block minimizes L_rho plus the proximal term over its set
  (closed form where the assembled Hessian is a multiple of the identity
  or the block is unconstrained, projected gradient otherwise);
* lifted (default): duplicate variables y with consensus terms make every
  sub-step closed form - an unconstrained SPD solve in y_i and a single
  projection in z_i.

``solve_to_convergence`` iterates primal passes and dual updates until the
KKT residual is small; it is the internal full-accuracy reference used
wherever an optimal point is needed.
"""

import numpy as np
from dataclasses import dataclass, field

from . import _kernels as K
from .errors import DimensionError, NonConvergenceError, NumericsError
from .programs import (
    BilinearConstraint,
    BlockLayout,
    BlockVector,
    ConstraintRow,
    MultiConvexProgram,
    PrimalDualPoint,
    QuadraticObjective,
    WholeSpace,
    _as_flat_z,
    _as_mu,
    _as_param,
    augmented_lagrangian,
    evaluate_constraint,
    evaluate_objective,
    kkt_residual,
)

PATH_DIRECT = "direct"
PATH_LIFTED = "lifted"


@dataclass
class TrackerConfig:
    """Solver knobs: penalty rho, sweeps per step M, per-block proximal
    weights alpha, and which primal pass to run."""

    rho: float
    M: int
    alpha: object = 1e-6
    path: str = PATH_LIFTED
    pg_tol: float = 1e-10
    pg_maxit: int = 500

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if int(self.M) < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        self.M = int(self.M)
        if self.path not in (PATH_DIRECT, PATH_LIFTED):
            raise ValueError(f"path must be 'direct' or 'lifted', got {self.path!r}")

    def alpha_for(self, prog):
        """Per-block proximal weights as an array of length P."""
        a = np.asarray(self.alpha, dtype=np.float64).ravel()
        if a.size == 1:
            a = np.full(prog.num_blocks, float(a[0]))
        if a.shape[0] != prog.num_blocks:
            raise DimensionError(
                f"alpha has {a.shape[0]} entries, program has "
                f"{prog.num_blocks} blocks"
            )
        if np.any(a <= 0):
            raise ValueError("all alpha_i must be positive")
        return a


class TrackerState:
    """Mutable solver state: configuration plus the warm-start iterate.

    On the lifted path the state also owns the duplicate blocks y and their
    consensus multipliers nu. Single-owner: do not share one state between
    concurrent tracking loops.
    """

    def __init__(self, config, warm):
        self.config = config
        self.w = warm.copy()
        if config.path == PATH_LIFTED:
            self.y = self.w.z.data.copy()
            self.nu = np.zeros_like(self.y)
        else:
            self.y = None
            self.nu = None

    @property
    def warm(self):
        return self.w


@dataclass
class StepReport:
    """Diagnostics for one tracking step.

    al_values has M+1 entries (value before the first pass, then after each
    pass); on the lifted path these are values of the consensus-split
    augmented Lagrangian. CSV serialization emits one row per sweep with
    the step-level feasibility/KKT values repeated.
    """

    w: PrimalDualPoint
    al_values: np.ndarray
    displacements: np.ndarray
    feasibility: float
    kkt_residual: float

    CSV_HEADER = "step,sweep,al_value,displacement,feasibility,kkt_residual"

    def csv_rows(self, step):
        for l in range(len(self.displacements)):
            yield (
                f"{step},{l + 1},{self.al_values[l + 1]!r},"
                f"{self.displacements[l]!r},{self.feasibility!r},"
                f"{self.kkt_residual!r}"
            )


@dataclass
class OracleResult:
    point: PrimalDualPoint
    residual: float
    outer_iterations: int
    # (y, nu) of the lifted pass at the solution; pass back in as
    # warm_lifted to make warm-started re-solves cheap
    lifted_state: tuple = None


# ---------------------------------------------------------------------------
# primal passes


def block_update(prog, state, i, z_current, mu, s):
    """Minimizer of the block-i subproblem of L_rho plus the proximal term.

    Assembles the block quadratic H_ii + rho E^T E + alpha_i I (positive
    definite) and minimizes it over the block set: a direct solve for
    unconstrained blocks, a single projection when the Hessian is a
    nonnegative multiple of the identity, and a projected-gradient loop to
    a tight fixed tolerance otherwise.
    """
    cfg = state.config
    cp = prog.compiled()
    Ls, g0 = K.freeze_parameter(cp, _as_param(prog, s))
    alpha = cfg.alpha_for(prog)
    return K.block_update(
        cp, Ls, g0, _as_flat_z(prog, z_current), _as_mu(prog, mu), i,
        cfg.rho, alpha[i], cfg.pg_tol, cfg.pg_maxit,
    )


def sweep(prog, state, z, mu, s):
    """One Gauss-Seidel pass (blocks in ascending order, freshest values)."""
    cfg = state.config
    cp = prog.compiled()
    Ls, g0 = K.freeze_parameter(cp, _as_param(prog, s))
    zf = _as_flat_z(prog, z).copy()
    disp_sq = np.zeros(prog.num_blocks)
    K.sweep_direct(cp, Ls, g0, zf, _as_mu(prog, mu), cfg.rho,
                   cfg.alpha_for(prog), cfg.pg_tol, cfg.pg_maxit, disp_sq)
    return BlockVector(prog.layout, zf)


def lifted_cycle(prog, state, mu, s):
    """One consensus-split cycle; updates state.y and state.w.z in place.

    Per block: (a) y-step, the exact solve of the SPD system of the
    quadratic in y_i; (b) z-step, projection of
    (alpha_i z_i + rho y_i + nu_i) / (alpha_i + rho) onto the block set.
    """
    if state.y is None:
        raise ValueError("lifted state not initialized (config.path != 'lifted')")
    cfg = state.config
    cp = prog.compiled()
    Ls, g0 = K.freeze_parameter(cp, _as_param(prog, s))
    disp_sq = np.zeros(prog.num_blocks)
    K.lifted_cycle(cp, Ls, g0, state.y, state.w.z.data, _as_mu(prog, mu),
                   state.nu, cfg.rho, cfg.alpha_for(prog), disp_sq)
    return state.y, state.w.z.data


def lifted_al_value(prog, y, z, mu, nu, s, rho):
    """Consensus-split augmented Lagrangian: f(y) + (mu + rho/2 g)^T g(y,s)
    + (nu + rho/2 (y - z))^T (y - z)."""
    g = evaluate_constraint(prog, y, s)
    d = y - z
    return (evaluate_objective(prog, y) + float((mu + 0.5 * rho * g) @ g)
            + float((nu + 0.5 * rho * d) @ d))


# ---------------------------------------------------------------------------
# tracking step


def track_step(prog, state, s_next):
    """Advance the tracker to the next parameter value: M primal passes
    from the warm start, then the single dual update
    mu <- mu + rho g(z, s_next) (and nu <- nu + rho (y - z) on the lifted
    path). Returns (state, StepReport); the state is updated in place."""
    cfg = state.config
    s = _as_param(prog, s_next)
    cp = prog.compiled()
    Ls, g0 = K.freeze_parameter(cp, s)
    alpha = cfg.alpha_for(prog)
    zf = state.w.z.data
    mu = state.w.mu
    lifted = cfg.path == PATH_LIFTED

    al = np.empty(cfg.M + 1)
    disp = np.empty(cfg.M)
    if lifted:
        al[0] = lifted_al_value(prog, state.y, zf, mu, state.nu, s, cfg.rho)
    else:
        al[0] = augmented_lagrangian(prog, zf, mu, s, cfg.rho)

    disp_sq = np.zeros(prog.num_blocks)
    for l in range(1, cfg.M + 1):
        if lifted:
            K.lifted_cycle(cp, Ls, g0, state.y, zf, mu, state.nu,
                           cfg.rho, alpha, disp_sq)
            finite = np.all(np.isfinite(zf)) and np.all(np.isfinite(state.y))
        else:
            K.sweep_direct(cp, Ls, g0, zf, mu, cfg.rho, alpha,
                           cfg.pg_tol, cfg.pg_maxit, disp_sq)
            finite = np.all(np.isfinite(zf))
        if not finite:
            raise NumericsError(f"non-finite iterate after sweep {l}", context=l)
        disp[l - 1] = np.sqrt(disp_sq.sum())
        if lifted:
            al[l] = lifted_al_value(prog, state.y, zf, mu, state.nu, s, cfg.rho)
        else:
            al[l] = augmented_lagrangian(prog, zf, mu, s, cfg.rho)

    g_final = K.constraint_value(cp, Ls, g0, zf)
    state.w.mu = mu + cfg.rho * g_final
    if lifted:
        state.nu += cfg.rho * (state.y - zf)
    feas = float(np.linalg.norm(g_final))
    res = kkt_residual(prog, state.w, s)
    report = StepReport(state.w.copy(), al, disp, feas, res)
    return state, report


# ---------------------------------------------------------------------------
# lifted reformulation as an explicit program


def lift_program(prog):
    """Duplicate-variable reformulation: blocks (y_1..y_P, z_1..z_P),
    objective moved onto y, original constraint rows in y plus consensus
    rows y_i - z_i = 0, unconstrained y blocks, original sets on z."""
    layout = prog.layout
    P = layout.num_blocks
    nz = layout.total
    new_layout = BlockLayout(list(layout.sizes) + list(layout.sizes))

    H = np.zeros((2 * nz, 2 * nz))
    H[:nz, :nz] = prog.objective.H
    h = np.concatenate([prog.objective.h, np.zeros(nz)])
    obj = QuadraticObjective(H, h, prog.objective.c0)

    rows = []
    for row in prog.constraint.rows:
        rows.append(ConstraintRow(
            pairs={(a, b): np.array(Q, copy=True) for (a, b), Q in row.pairs.items()},
            linear={i: np.array(v, copy=True) for i, v in row.linear.items()},
            couplings={i: np.array(C, copy=True) for i, C in row.couplings.items()},
        ))
    for i in range(P):
        n_i = layout.sizes[i]
        for q in range(n_i):
            unit = np.zeros(n_i)
            unit[q] = 1.0
            rows.append(ConstraintRow(linear={i: unit.copy(), P + i: -unit}))

    m = prog.num_constraints
    p = prog.parameter_dim
    S = np.vstack([prog.constraint.S, np.zeros((nz, p))])
    t = np.concatenate([prog.constraint.t, np.zeros(nz)])
    con = BilinearConstraint(rows, S, t)

    sets = [WholeSpace(layout.sizes[i]) for i in range(P)] + list(prog.sets)
    return MultiConvexProgram(new_layout, obj, con, sets)


# ---------------------------------------------------------------------------
# reference solver


def solve_to_convergence(prog, w0, s, rho, tol=1e-8, max_outer=200, *,
                         M=20, alpha=1e-6, path=PATH_DIRECT,
                         pg_tol=1e-10, pg_maxit=500, warm_lifted=None):
    """Iterate primal passes and dual updates until the KKT residual drops
    below tol. Each outer iteration runs passes until the blockwise
    displacement falls under tol/10 (capped at 10 M passes), then performs
    a dual update. This is the full-accuracy reference ("oracle") used
    wherever optimal points are needed.

    Raises NonConvergenceError (carrying the best point seen and its
    residual) after max_outer outer iterations.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    s = _as_param(prog, s)
    lifted = path == PATH_LIFTED
    res = kkt_residual(prog, w0, s)
    if res < tol:
        return OracleResult(w0.copy(), res, 0, warm_lifted)

    cfg = TrackerConfig(rho=rho, M=M, alpha=alpha, path=path,
                        pg_tol=pg_tol, pg_maxit=pg_maxit)
    cp = prog.compiled()
    Ls, g0 = K.freeze_parameter(cp, s)
    alpha_vec = cfg.alpha_for(prog)
    zf = w0.z.data.copy()
    mu = w0.mu.copy()
    if lifted:
        if warm_lifted is not None:
            y = warm_lifted[0].copy()
            nu = warm_lifted[1].copy()
        else:
            y = zf.copy()
            nu = np.zeros_like(zf)
    else:
        y = None
        nu = None

    best_res = res
    best_w = w0.copy()
    best_lifted = None
    disp_sq = np.zeros(prog.num_blocks)
    disp_stop = tol / 10.0
    recent = np.empty(5)
    for outer in range(1, max_outer + 1):
        d_prev = np.inf
        recent[:] = 0.9999
        for it in range(10 * cfg.M):
            if lifted:
                K.lifted_cycle(cp, Ls, g0, y, zf, mu, nu, rho, alpha_vec, disp_sq)
            else:
                K.sweep_direct(cp, Ls, g0, zf, mu, rho, alpha_vec,
                               cfg.pg_tol, cfg.pg_maxit, disp_sq)
            if not np.all(np.isfinite(zf)):
                raise NumericsError(
                    f"non-finite iterate in outer iteration {outer}",
                    context=outer,
                )
            d = np.sqrt(disp_sq.max())
            # displacement alone underestimates the distance to the pass
            # limit by the contraction amplification 1/(1 - rate); bound it
            # with the worst recent ratio so the sub-minimizers are tight
            # enough for the post-update residual to reach tol
            if d_prev > 0 and np.isfinite(d_prev):
                recent[it % recent.size] = min(d / d_prev, 0.9999)
            d_prev = d
            if d < disp_stop:
                r = recent.max()
                if d * r / (1.0 - r) < disp_stop:
                    break
        g = K.constraint_value(cp, Ls, g0, zf)
        mu = mu + rho * g
        if lifted:
            nu += rho * (y - zf)
        w = PrimalDualPoint(BlockVector(prog.layout, zf.copy()), mu.copy())
        res = kkt_residual(prog, w, s)
        if res < best_res:
            best_res = res
            best_w = w
            best_lifted = (y.copy(), nu.copy()) if lifted else None
        if res < tol:
            return OracleResult(
                w, res, outer, (y.copy(), nu.copy()) if lifted else None
            )
    err = NonConvergenceError(
        f"no convergence to tol={tol} within {max_outer} outer iterations "
        f"(best residual {best_res:.3e})",
        point=best_w, residual=best_res, outer_iterations=max_outer,
    )
    err.lifted_state = best_lifted
    raise err
