"""Tiny two-block benchmark program used in tests and CLI demos:

    minimize (z1 - 1)^2 + (z2 - 1)^2
    s.t.     z1 z2 = s,   z in [0, 2]^2.

For s in (0, 4) the symmetric critical point is z = (sqrt(s), sqrt(s))
with multiplier mu = 2 (1 - sqrt(s)) / sqrt(s); at s = 1 the constrained
minimum coincides with the unconstrained one and mu = 0.
"""

import numpy as np

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


def toy_program():
    layout = BlockLayout([1, 1])
    objective = QuadraticObjective(
        2.0 * np.eye(2), np.array([-2.0, -2.0]), 2.0
    )
    row = ConstraintRow(pairs={(0, 1): np.array([[1.0]])})
    constraint = BilinearConstraint([row], S=np.array([[-1.0]]), t=np.zeros(1))
    sets = [Box([0.0], [2.0]), Box([0.0], [2.0])]
    return MultiConvexProgram(layout, objective, constraint, sets)


def toy_solution(s):
    """Symmetric critical point at parameter value s (0 < s < 4)."""
    s = float(np.asarray(s).ravel()[0])
    if not 0 < s < 4:
        raise ValueError(f"closed-form point only exists for s in (0, 4), got {s}")
    v = np.sqrt(s)
    mu = 2.0 * (1.0 - v) / v
    prog = toy_program()
    return PrimalDualPoint(
        BlockVector(prog.layout, np.array([v, v])), np.array([mu])
    )


def toy_point(z1, z2, mu=0.0):
    prog = toy_program()
    return PrimalDualPoint(
        BlockVector(prog.layout, np.array([float(z1), float(z2)])),
        np.array([float(mu)]),
    )
