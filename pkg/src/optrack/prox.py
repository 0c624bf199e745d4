"""Closed-form projections and weighted proximal steps for the supported sets."""

import numpy as np

from .errors import DimensionError
from .programs import Ball, Box, NonnegativeOrthant, WholeSpace


def _check_dim(set_, x):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != set_.dim:
        raise DimensionError(
            f"point has length {x.shape[0]}, set has dimension {set_.dim}"
        )
    return x


def project(set_, x):
    """Euclidean projection argmin_{y in set} ||y - x||_2.

    Box: componentwise clamp (infinite bounds pass through). Ball: radial
    scaling, with the tie at the center broken to the center itself.
    Orthant: clamp at zero. Whole space: identity.
    """
    x = _check_dim(set_, x)
    if isinstance(set_, Box):
        return np.clip(x, set_.lower, set_.upper)
    if isinstance(set_, Ball):
        d = x - set_.center
        nrm = np.linalg.norm(d)
        if nrm <= set_.radius:
            return x.copy()
        return set_.center + d * (set_.radius / nrm)
    if isinstance(set_, NonnegativeOrthant):
        return np.maximum(x, 0.0)
    if isinstance(set_, WholeSpace):
        return x.copy()
    raise TypeError(f"unsupported set {set_!r}")


def prox_weighted(set_, x_prox, alpha, x_target, rho):
    """Minimizer over the set of (rho/2)||x_target - z||^2 + (alpha/2)||z - x_prox||^2.

    Equals the projection of the weighted average
    (alpha x_prox + rho x_target) / (alpha + rho); with alpha = 0 it reduces
    to a plain projection of x_target.
    """
    if alpha < 0:
        raise ValueError(f"prox weight alpha must be >= 0, got {alpha}")
    if not rho > 0:
        raise ValueError(f"penalty rho must be positive, got {rho}")
    x_prox = _check_dim(set_, x_prox)
    x_target = _check_dim(set_, x_target)
    return project(set_, (alpha * x_prox + rho * x_target) / (alpha + rho))
