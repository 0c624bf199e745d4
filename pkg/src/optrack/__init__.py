"""optrack: tracking local optima of parametric multi-convex programs.

A fixed number of proximal Gauss-Seidel passes plus a single dual update
per parameter change, with closed-form sub-steps, an internal
full-accuracy reference solver, an NMPC layer for constrained bilinear
models and reproducible experiment drivers.
"""

from ._kernels import backend_name
from .errors import (
    DimensionError,
    InvalidBlockError,
    ModelError,
    NonConvergenceError,
    NumericsError,
    OptrackError,
)
from .programs import (
    Ball,
    BilinearConstraint,
    BlockLayout,
    BlockVector,
    Box,
    ConstraintRow,
    MultiConvexProgram,
    NonnegativeOrthant,
    PrimalDualPoint,
    QuadraticObjective,
    WholeSpace,
    augmented_lagrangian,
    block_affine_constraint,
    block_quadratic_objective,
    constraint_jacobian,
    evaluate_constraint,
    evaluate_objective,
    kkt_residual,
    load_program,
    objective_gradient,
    program_from_dict,
    program_hash,
    program_to_dict,
    save_program,
)
from .prox import project, prox_weighted
from .solver import (
    OracleResult,
    StepReport,
    TrackerConfig,
    TrackerState,
    block_update,
    lift_program,
    lifted_cycle,
    solve_to_convergence,
    sweep,
    track_step,
)
from .nmpc import (
    BilinearModel,
    ClosedLoopTrace,
    NmpcSpec,
    build_nmpc_program,
    dc_motor_model,
    default_dc_motor_spec,
    run_closed_loop,
    run_oracle_loop,
    simulate_plant,
    square_wave,
)
from .experiments import (
    ErrorSeries,
    RateFit,
    contraction_probe,
    dt_sweep,
    feasibility_series,
    normalized_l2,
    psi,
    rate_experiment,
    tracking_error_series,
)

__version__ = "0.1.0"
