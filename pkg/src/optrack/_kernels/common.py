"""Flat array representation of a program, shared by both kernel backends.

A ``CompiledProgram`` packs everything the sweep kernels touch into plain
C-contiguous float64 arrays: the quadratic objective, the bilinear
constraint as stacked per-pair tensors plus a dense linear part, the
parameter maps, and an integer encoding of the per-block constraint sets.
Compilation happens once per program; the parameter is folded in per time
step by :func:`freeze_parameter`, which is the only per-step cost that
depends on the parameter dimension.
"""

import numpy as np

SET_BOX = 0
SET_BALL = 1
SET_ORTHANT = 2
SET_WHOLE = 3


class CompiledProgram:
    """Kernel-facing view of a multi-convex program (plain arrays only)."""

    __slots__ = (
        "num_blocks", "offsets", "nz", "m", "p",
        "H", "h", "c0",
        "pair_a", "pair_b", "pair_off", "pair_data",
        "L", "S", "t",
        "coup_blocks", "coup_data",
        "set_kind", "box_lo", "box_hi", "ball_center", "ball_radius",
    )

    def __init__(self, sizes, H, h, c0, pair_terms, L, S, t, couplings, sets):
        """Build the flat representation.

        pair_terms: dict {(a, b): tensor (m, n_a, n_b)} with a < b.
        couplings:  dict {i: tensor (m, n_i, p)} for parameter-block
                    bilinear terms z_i^T C s.
        sets:       list of (kind, payload) tuples; payload is (lo, hi) for
                    boxes, (center, radius) for balls, None otherwise.
        """
        sizes = np.asarray(sizes, dtype=np.int64)
        self.num_blocks = int(sizes.shape[0])
        self.offsets = np.zeros(self.num_blocks + 1, dtype=np.int64)
        np.cumsum(sizes, out=self.offsets[1:])
        self.nz = int(self.offsets[-1])

        self.H = np.ascontiguousarray(H, dtype=np.float64)
        self.h = np.ascontiguousarray(h, dtype=np.float64)
        self.c0 = float(c0)

        self.m = int(S.shape[0])
        self.p = int(S.shape[1])

        keys = sorted(pair_terms.keys())
        self.pair_a = np.array([k[0] for k in keys], dtype=np.int64)
        self.pair_b = np.array([k[1] for k in keys], dtype=np.int64)
        self.pair_off = np.zeros(len(keys) + 1, dtype=np.int64)
        chunks = []
        for idx, k in enumerate(keys):
            tens = np.ascontiguousarray(pair_terms[k], dtype=np.float64)
            chunks.append(tens.ravel())
            self.pair_off[idx + 1] = self.pair_off[idx] + tens.size
        self.pair_data = (
            np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float64)
        )

        self.L = np.ascontiguousarray(L, dtype=np.float64)
        self.S = np.ascontiguousarray(S, dtype=np.float64)
        self.t = np.ascontiguousarray(t, dtype=np.float64)

        self.coup_blocks = sorted(couplings.keys())
        self.coup_data = [
            np.ascontiguousarray(couplings[i], dtype=np.float64)
            for i in self.coup_blocks
        ]

        self.set_kind = np.zeros(self.num_blocks, dtype=np.int64)
        self.box_lo = np.full(self.nz, -np.inf)
        self.box_hi = np.full(self.nz, np.inf)
        self.ball_center = np.zeros(self.nz)
        self.ball_radius = np.zeros(self.num_blocks)
        for i, (kind, payload) in enumerate(sets):
            self.set_kind[i] = kind
            sl = self.block_slice(i)
            if kind == SET_BOX:
                lo, hi = payload
                self.box_lo[sl] = lo
                self.box_hi[sl] = hi
            elif kind == SET_BALL:
                center, radius = payload
                self.ball_center[sl] = center
                self.ball_radius[i] = radius
            elif kind == SET_ORTHANT:
                self.box_lo[sl] = 0.0

    def block_slice(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def block_size(self, i):
        return int(self.offsets[i + 1] - self.offsets[i])

    def pair_tensor(self, k):
        """Tensor of pair k as an (m, n_a, n_b) view into the flat buffer."""
        na = self.block_size(int(self.pair_a[k]))
        nb = self.block_size(int(self.pair_b[k]))
        lo, hi = self.pair_off[k], self.pair_off[k + 1]
        return self.pair_data[lo:hi].reshape(self.m, na, nb)

    @property
    def num_pairs(self):
        return len(self.pair_a)


def freeze_parameter(cp, s):
    """Fold the parameter into the constraint: returns (Ls, g0).

    Ls is the effective linear map (m, nz) at this parameter value and g0
    the constant term S s + t, so g(z, s) = pair terms + Ls z + g0.
    When the program has no parameter-block couplings Ls aliases cp.L.
    """
    s = np.asarray(s, dtype=np.float64)
    g0 = cp.S @ s + cp.t
    if not cp.coup_blocks:
        return cp.L, g0
    Ls = cp.L.copy()
    for i, C in zip(cp.coup_blocks, cp.coup_data):
        # C has shape (m, n_i, p); contribution to the block-i columns.
        Ls[:, cp.block_slice(i)] += C @ s
    return Ls, g0
