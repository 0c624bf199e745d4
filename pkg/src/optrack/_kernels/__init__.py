"""Kernel backend selection.

The hot per-block operations (constraint contractions, block subproblem
solves, full sweeps) exist twice: a Cython extension (``_core``) and a pure
numpy fallback (``numpy_backend``). The compiled backend is used when it
imports; setting OPTRACK_PURE_PYTHON=1 forces the fallback. Both expose the
same module-level API and are checked against each other in the test suite.
"""

import os

from . import numpy_backend
from .common import (  # noqa: F401
    SET_BALL,
    SET_BOX,
    SET_ORTHANT,
    SET_WHOLE,
    CompiledProgram,
    freeze_parameter,
)

if os.environ.get("OPTRACK_PURE_PYTHON"):
    backend = numpy_backend
else:
    try:
        from . import _core as backend
    except ImportError:
        backend = numpy_backend

backend_name = "compiled" if backend.is_compiled else "numpy"

constraint_value = backend.constraint_value
constraint_jacobian = backend.constraint_jacobian
block_affine = backend.block_affine
project_block = backend.project_block
block_update = backend.block_update
sweep_direct = backend.sweep_direct
lifted_cycle = backend.lifted_cycle


def objective_value(cp, z):
    return 0.5 * (z @ (cp.H @ z)) + cp.h @ z + cp.c0


def objective_gradient(cp, z):
    return cp.H @ z + cp.h
