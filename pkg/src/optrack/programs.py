"""Multi-convex parametric programs and their evaluation oracles.

A program is

    minimize  f(z_1, ..., z_P)  =  0.5 z^T H z + h^T z + c0
    s.t.      g(z_1, ..., z_P, s) = 0
              z_i in Z_i,

where g is affine in every single block (pairwise bilinear + linear terms)
and affine in the parameter s, and each Z_i is a simple convex set with a
closed-form projection. The objective is blockwise convex: every diagonal
Hessian block H_ii must be positive semidefinite, which is verified at
construction.

Programs are immutable after construction and safe to share between
threads; all operations here are pure functions of their inputs.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from ._kernels.common import SET_BALL, SET_BOX, SET_ORTHANT, SET_WHOLE, CompiledProgram
from .errors import DimensionError, InvalidBlockError, ModelError

SYMMETRY_RTOL = 1e-12
PSD_TOL = 1e-10


# ---------------------------------------------------------------------------
# layout and vectors


class BlockLayout:
    """Partition of the decision vector into P blocks of given sizes."""

    def __init__(self, sizes):
        sizes = [int(n) for n in sizes]
        if len(sizes) < 1:
            raise ModelError("a layout needs at least one block")
        if any(n < 1 for n in sizes):
            raise ModelError(f"block sizes must be >= 1, got {sizes}")
        self.sizes = tuple(sizes)
        self.offsets = tuple(int(o) for o in np.concatenate(([0], np.cumsum(sizes))))
        self.total = self.offsets[-1]

    @property
    def num_blocks(self):
        return len(self.sizes)

    def block_slice(self, i):
        if not 0 <= i < self.num_blocks:
            raise InvalidBlockError(
                f"block index {i} out of range for {self.num_blocks} blocks"
            )
        return slice(self.offsets[i], self.offsets[i + 1])

    def __eq__(self, other):
        return isinstance(other, BlockLayout) and self.sizes == other.sizes

    def __repr__(self):
        return f"BlockLayout(sizes={list(self.sizes)})"


class BlockVector:
    """A decision vector together with its block layout."""

    def __init__(self, layout, data):
        data = np.asarray(data, dtype=np.float64).ravel()
        if data.shape[0] != layout.total:
            raise DimensionError(
                f"vector of length {data.shape[0]} does not match layout "
                f"total {layout.total}"
            )
        self.layout = layout
        self.data = data

    @classmethod
    def from_blocks(cls, layout, blocks):
        if len(blocks) != layout.num_blocks:
            raise DimensionError(
                f"expected {layout.num_blocks} blocks, got {len(blocks)}"
            )
        parts = []
        for i, b in enumerate(blocks):
            b = np.asarray(b, dtype=np.float64).ravel()
            if b.shape[0] != layout.sizes[i]:
                raise DimensionError(
                    f"block {i} has length {b.shape[0]}, expected "
                    f"{layout.sizes[i]}", block=i,
                )
            parts.append(b)
        return cls(layout, np.concatenate(parts))

    def block(self, i):
        """View of block i (shares memory)."""
        return self.data[self.layout.block_slice(i)]

    def copy(self):
        return BlockVector(self.layout, self.data.copy())

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"BlockVector({self.data!r})"


@dataclass
class PrimalDualPoint:
    """Tracked iterate w = (z, mu)."""

    z: BlockVector
    mu: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).ravel()

    def copy(self):
        return PrimalDualPoint(self.z.copy(), self.mu.copy())

    def stacked(self):
        return np.concatenate([self.z.data, self.mu])

    def distance_to(self, other):
        return float(np.linalg.norm(self.stacked() - other.stacked()))


# ---------------------------------------------------------------------------
# constraint sets


class Box:
    """Axis-aligned box; infinite bounds are allowed."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=np.float64).ravel()
        self.upper = np.asarray(upper, dtype=np.float64).ravel()
        if self.lower.shape != self.upper.shape:
            raise ModelError("box bounds must have equal length")
        if np.any(self.lower > self.upper):
            bad = int(np.argmax(self.lower > self.upper))
            raise ModelError(
                f"box lower bound exceeds upper bound at component {bad}"
            )

    @property
    def dim(self):
        return self.lower.shape[0]

    def __repr__(self):
        return f"Box({self.lower!r}, {self.upper!r})"


class Ball:
    """Euclidean ball with positive radius."""

    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=np.float64).ravel()
        self.radius = float(radius)
        if not self.radius > 0:
            raise ModelError(f"ball radius must be positive, got {radius}")

    @property
    def dim(self):
        return self.center.shape[0]

    def __repr__(self):
        return f"Ball(center={self.center!r}, radius={self.radius})"


class NonnegativeOrthant:
    def __init__(self, dim):
        self.dim = int(dim)
        if self.dim < 1:
            raise ModelError("orthant dimension must be >= 1")

    def __repr__(self):
        return f"NonnegativeOrthant({self.dim})"


class WholeSpace:
    """Unconstrained block. Only used internally for lifted auxiliary
    blocks; user-facing programs should use compact sets."""

    def __init__(self, dim):
        self.dim = int(dim)
        if self.dim < 1:
            raise ModelError("dimension must be >= 1")

    def __repr__(self):
        return f"WholeSpace({self.dim})"


def _encode_set(s):
    if isinstance(s, Box):
        return SET_BOX, (s.lower, s.upper)
    if isinstance(s, Ball):
        return SET_BALL, (s.center, s.radius)
    if isinstance(s, NonnegativeOrthant):
        return SET_ORTHANT, None
    if isinstance(s, WholeSpace):
        return SET_WHOLE, None
    raise ModelError(f"unsupported constraint set {s!r}")


# ---------------------------------------------------------------------------
# objective and constraint


class QuadraticObjective:
    """f(z) = 0.5 z^T H z + h^T z + c0 with H symmetric."""

    def __init__(self, H, h, c0=0.0):
        H = np.asarray(H, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64).ravel()
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ModelError(f"H must be square, got shape {H.shape}")
        if h.shape[0] != H.shape[0]:
            raise DimensionError(
                f"h has length {h.shape[0]}, expected {H.shape[0]}"
            )
        scale = max(1.0, np.abs(H).max()) if H.size else 1.0
        if H.size and np.abs(H - H.T).max() > SYMMETRY_RTOL * scale:
            raise ModelError("H is not symmetric to 1e-12 relative")
        self.H = 0.5 * (H + H.T)
        self.h = h
        self.c0 = float(c0)

    @property
    def dim(self):
        return self.h.shape[0]


@dataclass
class ConstraintRow:
    """One scalar constraint row.

    pairs:     {(a, b): Q} with a < b and Q of shape (n_a, n_b), the
               bilinear coupling z_a^T Q z_b.
    linear:    {i: vec} with vec of length n_i.
    couplings: {i: C} with C of shape (n_i, p), the parameter-block
               bilinear term z_i^T C s. Empty for purely additive
               parameter dependence.
    """

    pairs: dict = field(default_factory=dict)
    linear: dict = field(default_factory=dict)
    couplings: dict = field(default_factory=dict)


class BilinearConstraint:
    """Stacked rows g(z, s) with parameter map S s + t.

    g_j(z, s) = sum_{a<b} z_a^T Q_j^{ab} z_b + sum_i A_j^i z_i
                + sum_i z_i^T C_j^i s + (S s + t)_j
    """

    def __init__(self, rows, S, t):
        self.rows = list(rows)
        self.S = np.asarray(S, dtype=np.float64)
        self.t = np.asarray(t, dtype=np.float64).ravel()
        if self.S.ndim != 2:
            raise ModelError(f"S must be a matrix, got shape {self.S.shape}")
        if self.S.shape[0] != len(self.rows) or self.t.shape[0] != len(self.rows):
            raise DimensionError(
                f"S/t rows ({self.S.shape[0]}/{self.t.shape[0]}) must match "
                f"the number of constraint rows ({len(self.rows)})"
            )

    @property
    def num_rows(self):
        return len(self.rows)

    @property
    def parameter_dim(self):
        return self.S.shape[1]

    def _validate_against(self, layout):
        P = layout.num_blocks
        p = self.parameter_dim
        for j, row in enumerate(self.rows):
            for (a, b), Q in row.pairs.items():
                if not (0 <= a < b < P):
                    raise InvalidBlockError(
                        f"row {j}: pair ({a},{b}) needs 0 <= a < b < {P}"
                    )
                Q = np.asarray(Q, dtype=np.float64)
                if Q.shape != (layout.sizes[a], layout.sizes[b]):
                    raise DimensionError(
                        f"row {j}: pair ({a},{b}) matrix has shape {Q.shape}, "
                        f"expected {(layout.sizes[a], layout.sizes[b])}",
                        block=a,
                    )
            for i, vec in row.linear.items():
                vec = np.asarray(vec, dtype=np.float64).ravel()
                if not 0 <= i < P:
                    raise InvalidBlockError(f"row {j}: linear block {i} out of range")
                if vec.shape[0] != layout.sizes[i]:
                    raise DimensionError(
                        f"row {j}: linear term for block {i} has length "
                        f"{vec.shape[0]}, expected {layout.sizes[i]}", block=i,
                    )
            for i, C in row.couplings.items():
                C = np.asarray(C, dtype=np.float64)
                if not 0 <= i < P:
                    raise InvalidBlockError(f"row {j}: coupling block {i} out of range")
                if C.shape != (layout.sizes[i], p):
                    raise DimensionError(
                        f"row {j}: coupling for block {i} has shape {C.shape}, "
                        f"expected {(layout.sizes[i], p)}", block=i,
                    )


# ---------------------------------------------------------------------------
# the program


class MultiConvexProgram:
    """Immutable program bundle; compiles itself to flat arrays on demand."""

    def __init__(self, layout, objective, constraint, sets):
        if objective.dim != layout.total:
            raise DimensionError(
                f"objective dimension {objective.dim} does not match layout "
                f"total {layout.total}"
            )
        if len(sets) != layout.num_blocks:
            raise DimensionError(
                f"expected {layout.num_blocks} sets, got {len(sets)}"
            )
        for i, s in enumerate(sets):
            _encode_set(s)
            if s.dim != layout.sizes[i]:
                raise DimensionError(
                    f"set for block {i} has dimension {s.dim}, expected "
                    f"{layout.sizes[i]}", block=i,
                )
        constraint._validate_against(layout)
        for i in range(layout.num_blocks):
            sl = layout.block_slice(i)
            Hii = objective.H[sl, sl]
            if Hii.size:
                lo = np.linalg.eigvalsh(Hii)[0]
                if lo < -PSD_TOL * max(1.0, np.abs(Hii).max()):
                    raise ModelError(
                        f"diagonal Hessian block {i} is not positive "
                        f"semidefinite (min eigenvalue {lo:.3e}); the "
                        f"objective is not blockwise convex"
                    )
        self.layout = layout
        self.objective = objective
        self.constraint = constraint
        self.sets = list(sets)
        self._compiled = None

    @property
    def num_blocks(self):
        return self.layout.num_blocks

    @property
    def num_constraints(self):
        return self.constraint.num_rows

    @property
    def parameter_dim(self):
        return self.constraint.parameter_dim

    def compiled(self):
        """Flat-array view used by the kernels (built once, cached)."""
        if self._compiled is None:
            self._compiled = _compile(self)
        return self._compiled

    def with_objective(self, objective):
        """Same constraint/sets with a different objective.

        Shares the compiled constraint tensors, so swapping objectives
        (e.g. on a reference change) does not recompile the constraint.
        """
        prog = MultiConvexProgram(self.layout, objective, self.constraint, self.sets)
        if self._compiled is not None:
            cp = self._compiled
            new_cp = CompiledProgram.__new__(CompiledProgram)
            for name in CompiledProgram.__slots__:
                setattr(new_cp, name, getattr(cp, name))
            new_cp.H = np.ascontiguousarray(objective.H)
            new_cp.h = np.ascontiguousarray(objective.h)
            new_cp.c0 = objective.c0
            prog._compiled = new_cp
        return prog


def _compile(prog):
    layout = prog.layout
    m = prog.num_constraints
    p = prog.parameter_dim
    pair_terms = {}
    couplings = {}
    L = np.zeros((m, layout.total))
    for j, row in enumerate(prog.constraint.rows):
        for (a, b), Q in row.pairs.items():
            key = (a, b)
            if key not in pair_terms:
                pair_terms[key] = np.zeros((m, layout.sizes[a], layout.sizes[b]))
            pair_terms[key][j] += np.asarray(Q, dtype=np.float64)
        for i, vec in row.linear.items():
            L[j, layout.block_slice(i)] += np.asarray(vec, dtype=np.float64).ravel()
        for i, C in row.couplings.items():
            if i not in couplings:
                couplings[i] = np.zeros((m, layout.sizes[i], p))
            couplings[i][j] += np.asarray(C, dtype=np.float64)
    sets = [_encode_set(s) for s in prog.sets]
    return CompiledProgram(
        layout.sizes, prog.objective.H, prog.objective.h, prog.objective.c0,
        pair_terms, L, prog.constraint.S, prog.constraint.t, couplings, sets,
    )


# ---------------------------------------------------------------------------
# evaluation operations


def _as_flat_z(prog, z):
    if isinstance(z, BlockVector):
        if z.layout != prog.layout:
            raise DimensionError(
                f"vector layout {z.layout} does not match program layout "
                f"{prog.layout}"
            )
        return z.data
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape[0] != prog.layout.total:
        raise DimensionError(
            f"decision vector has length {z.shape[0]}, expected "
            f"{prog.layout.total}"
        )
    return z


def _as_param(prog, s):
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.shape[0] != prog.parameter_dim:
        raise DimensionError(
            f"parameter has length {s.shape[0]}, expected {prog.parameter_dim}"
        )
    return s


def _as_mu(prog, mu):
    mu = np.asarray(mu, dtype=np.float64).ravel()
    if mu.shape[0] != prog.num_constraints:
        raise DimensionError(
            f"multiplier has length {mu.shape[0]}, expected "
            f"{prog.num_constraints}"
        )
    return mu


def evaluate_objective(prog, z):
    """f(z) = 0.5 z^T H z + h^T z + c0."""
    return float(K.objective_value(prog.compiled(), _as_flat_z(prog, z)))


def objective_gradient(prog, z):
    return K.objective_gradient(prog.compiled(), _as_flat_z(prog, z))


def evaluate_constraint(prog, z, s):
    """g(z, s), a vector of length m."""
    cp = prog.compiled()
    Ls, g0 = K.freeze_parameter(cp, _as_param(prog, s))
    return K.constraint_value(cp, Ls, g0, _as_flat_z(prog, z))


def constraint_jacobian(prog, z, s):
    """Jacobian of g w.r.t. z at (z, s), shape (m, n_z)."""
    cp = prog.compiled()
    Ls, _ = K.freeze_parameter(cp, _as_param(prog, s))
    return K.constraint_jacobian(cp, Ls, _as_flat_z(prog, z))


def block_affine_constraint(prog, i, z, s):
    """(E, e) with g(z', s) = E z'_i + e for any z' equal to z off block i."""
    if not 0 <= i < prog.num_blocks:
        raise InvalidBlockError(
            f"block index {i} out of range for {prog.num_blocks} blocks"
        )
    cp = prog.compiled()
    Ls, g0 = K.freeze_parameter(cp, _as_param(prog, s))
    return K.block_affine(cp, Ls, g0, _as_flat_z(prog, z), i)


def block_quadratic_objective(prog, i, z):
    """(H_i, h_i, c_i): f restricted to block i at the off-block values in z.

    f(z | z_i := x) = 0.5 x^T H_i x + h_i^T x + c_i with H_i = H_ii PSD.
    """
    if not 0 <= i < prog.num_blocks:
        raise InvalidBlockError(
            f"block index {i} out of range for {prog.num_blocks} blocks"
        )
    zf = _as_flat_z(prog, z)
    sl = prog.layout.block_slice(i)
    H = prog.objective.H
    Hi = np.array(H[sl, sl], copy=True)
    zi = zf[sl]
    hi = prog.objective.h[sl] + H[sl, :] @ zf - Hi @ zi
    ci = evaluate_objective(prog, zf) - (0.5 * zi @ (Hi @ zi) + hi @ zi)
    return Hi, hi, float(ci)


def augmented_lagrangian(prog, z, mu, s, rho):
    """f(z) + (mu + rho/2 g(z,s))^T g(z,s)."""
    if not rho > 0:
        raise ValueError(f"penalty rho must be positive, got {rho}")
    g = evaluate_constraint(prog, z, s)
    mu = _as_mu(prog, mu)
    return evaluate_objective(prog, z) + float((mu + 0.5 * rho * g) @ g)


def project_onto_blocks(prog, z):
    """Projection of a flat vector onto the product of block sets."""
    cp = prog.compiled()
    zf = _as_flat_z(prog, z)
    out = np.empty_like(zf)
    for i in range(prog.num_blocks):
        sl = prog.layout.block_slice(i)
        out[sl] = K.project_block(cp, i, zf[sl])
    return out


def kkt_residual(prog, w, s):
    """Natural residual of the first-order optimality system.

    || w - Pi( w - F(w, s) ) ||_2 with F = (grad f + J^T mu, g) and Pi the
    projection onto the block sets (identity on the multiplier part). Zero
    exactly at critical points.
    """
    zf = _as_flat_z(prog, w.z)
    mu = _as_mu(prog, w.mu)
    s = _as_param(prog, s)
    cp = prog.compiled()
    Ls, g0 = K.freeze_parameter(cp, s)
    g = K.constraint_value(cp, Ls, g0, zf)
    J = K.constraint_jacobian(cp, Ls, zf)
    Fz = K.objective_gradient(cp, zf) + J.T @ mu
    stepped = zf - Fz
    proj = np.empty_like(stepped)
    for i in range(prog.num_blocks):
        sl = prog.layout.block_slice(i)
        proj[sl] = K.project_block(cp, i, stepped[sl])
    return float(np.sqrt(np.sum((zf - proj) ** 2) + g @ g))


# ---------------------------------------------------------------------------
# JSON serialization


def _matrix(a):
    return [list(map(float, row)) for row in np.atleast_2d(np.asarray(a))]


def _set_to_dict(s):
    if isinstance(s, Box):
        return {"type": "box", "lower": list(map(float, s.lower)),
                "upper": list(map(float, s.upper))}
    if isinstance(s, Ball):
        return {"type": "ball", "center": list(map(float, s.center)),
                "radius": s.radius}
    if isinstance(s, NonnegativeOrthant):
        return {"type": "nonnegative_orthant", "dim": s.dim}
    if isinstance(s, WholeSpace):
        return {"type": "whole_space", "dim": s.dim}
    raise ModelError(f"unsupported set {s!r}")


def _set_from_dict(d):
    kind = d["type"]
    if kind == "box":
        return Box(d["lower"], d["upper"])
    if kind == "ball":
        return Ball(d["center"], d["radius"])
    if kind == "nonnegative_orthant":
        return NonnegativeOrthant(d["dim"])
    if kind == "whole_space":
        return WholeSpace(d["dim"])
    raise ModelError(f"unknown set type {kind!r}")


def program_to_dict(prog):
    rows = []
    for row in prog.constraint.rows:
        rows.append({
            "pairs": [
                {"a": a, "b": b, "Q": _matrix(Q)}
                for (a, b), Q in sorted(row.pairs.items())
            ],
            "linear": [
                {"i": i, "a": list(map(float, np.ravel(v)))}
                for i, v in sorted(row.linear.items())
            ],
            "couplings": [
                {"i": i, "C": _matrix(C)} for i, C in sorted(row.couplings.items())
            ],
        })
    return {
        "layout": {"sizes": list(prog.layout.sizes)},
        "objective": {
            "H": _matrix(prog.objective.H),
            "h": list(map(float, prog.objective.h)),
            "c0": prog.objective.c0,
        },
        "constraint": {
            "rows": rows,
            "S": _matrix(prog.constraint.S),
            "t": list(map(float, prog.constraint.t)),
        },
        "sets": [_set_to_dict(s) for s in prog.sets],
        "parameter_dim": prog.parameter_dim,
    }


def program_from_dict(doc):
    layout = BlockLayout(doc["layout"]["sizes"])
    obj = QuadraticObjective(
        np.asarray(doc["objective"]["H"], dtype=np.float64),
        np.asarray(doc["objective"]["h"], dtype=np.float64),
        doc["objective"].get("c0", 0.0),
    )
    rows = []
    for rd in doc["constraint"]["rows"]:
        rows.append(ConstraintRow(
            pairs={(int(pd["a"]), int(pd["b"])): np.asarray(pd["Q"], dtype=np.float64)
                   for pd in rd.get("pairs", [])},
            linear={int(ld["i"]): np.asarray(ld["a"], dtype=np.float64)
                    for ld in rd.get("linear", [])},
            couplings={int(cd["i"]): np.asarray(cd["C"], dtype=np.float64)
                       for cd in rd.get("couplings", [])},
        ))
    con = BilinearConstraint(
        rows,
        np.asarray(doc["constraint"]["S"], dtype=np.float64),
        np.asarray(doc["constraint"]["t"], dtype=np.float64),
    )
    sets = [_set_from_dict(d) for d in doc["sets"]]
    return MultiConvexProgram(layout, obj, con, sets)


def save_program(prog, path):
    with open(path, "w") as fh:
        json.dump(program_to_dict(prog), fh, indent=1)


def load_program(path):
    with open(path) as fh:
        return program_from_dict(json.load(fh))


def program_hash(prog):
    """Stable content hash of the serialized program."""
    doc = json.dumps(program_to_dict(prog), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]
