"""Pure-numpy implementation of the sweep kernels.

Reference backend: always available, used as the fallback when the compiled
extension is missing and as the ground truth in the backend parity tests.
All functions operate on a :class:`~optrack._kernels.common.CompiledProgram`
plus the frozen parameter view (Ls, g0) from ``freeze_parameter``.
"""

import numpy as np

from ..errors import NumericsError
from .common import SET_BALL, SET_BOX, SET_ORTHANT, SET_WHOLE

IDENTITY_RTOL = 1e-12

is_compiled = False


def constraint_value(cp, Ls, g0, z):
    """g(z) = sum of pair terms + Ls z + g0."""
    g = g0 + Ls @ z
    for k in range(cp.num_pairs):
        T = cp.pair_tensor(k)
        za = z[cp.block_slice(int(cp.pair_a[k]))]
        zb = z[cp.block_slice(int(cp.pair_b[k]))]
        g += (T @ zb) @ za
    return g


def constraint_jacobian(cp, Ls, z):
    """Jacobian of g w.r.t. z at the frozen parameter."""
    J = np.array(Ls, copy=True)
    for k in range(cp.num_pairs):
        T = cp.pair_tensor(k)
        a, b = int(cp.pair_a[k]), int(cp.pair_b[k])
        za = z[cp.block_slice(a)]
        zb = z[cp.block_slice(b)]
        J[:, cp.block_slice(a)] += T @ zb
        J[:, cp.block_slice(b)] += np.tensordot(za, T, axes=(0, 1))
    return J


def block_affine(cp, Ls, g0, z, i):
    """(E, e) with g(z') = E z'_i + e for z' equal to z off block i."""
    sl = cp.block_slice(i)
    E = np.array(Ls[:, sl], copy=True)
    for k in range(cp.num_pairs):
        a, b = int(cp.pair_a[k]), int(cp.pair_b[k])
        if a == i:
            E += cp.pair_tensor(k) @ z[cp.block_slice(b)]
        elif b == i:
            E += np.tensordot(z[cp.block_slice(a)], cp.pair_tensor(k), axes=(0, 1))
    e = constraint_value(cp, Ls, g0, z) - E @ z[sl]
    return E, e


def project_block(cp, i, v):
    """Projection of v onto block i's constraint set (encoded form)."""
    kind = int(cp.set_kind[i])
    sl = cp.block_slice(i)
    if kind == SET_WHOLE:
        return np.array(v, copy=True)
    if kind == SET_BALL:
        center = cp.ball_center[sl]
        radius = cp.ball_radius[i]
        d = v - center
        nrm = np.linalg.norm(d)
        if nrm <= radius:
            return np.array(v, copy=True)
        return center + d * (radius / nrm)
    # box and orthant both reduce to a clamp against box_lo/box_hi
    return np.clip(v, cp.box_lo[sl], cp.box_hi[sl])


def _assemble_block_system(cp, Ls, g0, z, mu, i, rho, alpha_i):
    """Quadratic model of the penalized objective restricted to block i.

    Returns (P0, q, zi) so the subproblem is
    min over the block set of 0.5 x^T (P0 + alpha I) x + q^T x,
    with P0 = H_ii + rho E^T E and q absorbing the proximal center.
    """
    sl = cp.block_slice(i)
    zi = z[sl]
    E, e = block_affine(cp, Ls, g0, z, i)
    Hii = cp.H[sl, sl]
    hbar = cp.h[sl] + cp.H[sl, :] @ z - Hii @ zi
    P0 = Hii + rho * (E.T @ E)
    q = hbar + E.T @ (mu + rho * e) - alpha_i * zi
    return P0, q, zi


def _minimize_block(cp, i, P0, q, zi, alpha_i, pg_tol, pg_maxit):
    if not (np.all(np.isfinite(P0)) and np.all(np.isfinite(q))):
        raise NumericsError(
            f"non-finite values in the assembled system for block {i}",
            context=i,
        )
    n = zi.shape[0]
    kind = int(cp.set_kind[i])
    if kind == SET_WHOLE:
        return np.linalg.solve(P0 + alpha_i * np.eye(n), -q)
    # a nonnegative multiple of the identity lets the constrained minimum
    # be a single projection
    c = np.trace(P0) / n
    if np.abs(P0 - c * np.eye(n)).max() <= IDENTITY_RTOL * max(1.0, abs(c)):
        return project_block(cp, i, -q / (c + alpha_i))
    # projected gradient with step 1/L, warm-started at the proximal center
    lmax = np.linalg.eigvalsh(P0)[-1] + alpha_i
    x = zi.copy()
    for _ in range(pg_maxit):
        grad = P0 @ x + alpha_i * x + q
        x_new = project_block(cp, i, x - grad / lmax)
        gm = lmax * np.linalg.norm(x_new - x)
        x = x_new
        if gm < pg_tol:
            break
    return x


def block_update(cp, Ls, g0, z, mu, i, rho, alpha_i, pg_tol, pg_maxit):
    """Exact (or tight) minimizer of the block subproblem; returns z_i."""
    P0, q, zi = _assemble_block_system(cp, Ls, g0, z, mu, i, rho, alpha_i)
    return _minimize_block(cp, i, P0, q, zi, alpha_i, pg_tol, pg_maxit)


def sweep_direct(cp, Ls, g0, z, mu, rho, alpha, pg_tol, pg_maxit, disp_sq):
    """One Gauss-Seidel pass over all blocks; z updated in place."""
    for i in range(cp.num_blocks):
        sl = cp.block_slice(i)
        zi_new = block_update(cp, Ls, g0, z, mu, i, rho, alpha[i], pg_tol, pg_maxit)
        d = zi_new - z[sl]
        disp_sq[i] = d @ d
        z[sl] = zi_new


def lifted_cycle(cp, Ls, g0, y, z, mu, nu, rho, alpha, disp_sq):
    """One cycle of the consensus-split pass: per block, an unconstrained
    SPD solve in y followed by a projection step in z. Updates y, z in
    place; disp_sq[i] collects the squared displacement of both halves."""
    for i in range(cp.num_blocks):
        sl = cp.block_slice(i)
        n = int(cp.offsets[i + 1] - cp.offsets[i])
        alpha_i = alpha[i]
        yi = y[sl]
        # y-step: quadratic in y_i with Hessian H_ii + rho (E^T E + I) + alpha I
        E, e = block_affine(cp, Ls, g0, y, i)
        Hii = cp.H[sl, sl]
        hbar = cp.h[sl] + cp.H[sl, :] @ y - Hii @ yi
        A = Hii + rho * (E.T @ E) + (rho + alpha_i) * np.eye(n)
        rhs = -(hbar + E.T @ (mu + rho * e) + nu[sl] - rho * z[sl] - alpha_i * yi)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(rhs))):
            raise NumericsError(
                f"non-finite values in the assembled system for block {i}",
                context=i,
            )
        y_new = np.linalg.solve(A, rhs)
        dy = y_new - yi
        y[sl] = y_new
        # z-step: projection of the weighted average onto the block set
        v = (alpha_i * z[sl] + rho * y_new + nu[sl]) / (alpha_i + rho)
        z_new = project_block(cp, i, v)
        dz = z_new - z[sl]
        z[sl] = z_new
        disp_sq[i] = dy @ dy + dz @ dz
