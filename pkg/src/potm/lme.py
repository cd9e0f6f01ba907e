"""Local maximum-entropy (LME) shape functions.

The shape function of node ``I`` at a point ``x_p`` is

    N_I = Z_I / Z,   Z_I = exp(-beta |x_p - x_I|^2 + lambda . (x_p - x_I))

where the Lagrange multiplier ``lambda`` enforces first-order consistency
``sum_I N_I (x_p - x_I) = 0``. It is found with a damped Newton method on
the exact Hessian of ``log Z``. Gradients use the closed form
``B_I = -N_I J^-1 (x_p - x_I)``.

The scalar kernels in this module are compiled with numba and are shared by
the single-point API and by the batched search in :mod:`potm.search`, so a
material point gets bit-identical shape data no matter which code path (or
which worker) evaluates it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

# status codes returned by the compiled kernels
LME_OK = 0
LME_NOT_CONVERGED = 1
LME_SINGULAR = 2

_MAX_HALVINGS = 40
_POLISH_STEPS = 2


class LmeError(RuntimeError):
    """Base class for shape-function failures."""


class LmeConvergenceError(LmeError):
    """Newton iteration for the Lagrange multiplier did not converge."""


class DegenerateSupportError(LmeError):
    """Support nodes do not span the space (singular constraint Jacobian)."""


@dataclass(frozen=True)
class LmeParams:
    gamma: float = 1.8
    h: float = 1.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50

    def __post_init__(self):
        if self.h <= 0 or self.gamma <= 0:
            raise ValueError("gamma and h must be positive")
        if not 0.8 <= self.gamma <= 4.0:
            logger.warning("LME gamma=%g outside the recommended range [0.8, 4]", self.gamma)

    @property
    def beta(self) -> float:
        return compute_beta(self.gamma, self.h)


@dataclass
class LmeResult:
    N: np.ndarray
    B: np.ndarray
    lam: np.ndarray
    iterations: int


def compute_beta(gamma: float, h: float) -> float:
    """Locality parameter ``beta = gamma / h**2``."""
    if gamma <= 0 or h <= 0:
        raise ValueError(f"gamma and h must be positive, got gamma={gamma}, h={h}")
    return gamma / (h * h)


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _solve_small(A, b, out, dim):
    """Gaussian elimination with partial pivoting for dim <= 3.

    Returns False when a pivot is negligible relative to the matrix scale.
    """
    M = np.empty((3, 4))
    scale = 0.0
    for i in range(dim):
        for j in range(dim):
            M[i, j] = A[i, j]
            if abs(A[i, j]) > scale:
                scale = abs(A[i, j])
        M[i, dim] = b[i]
    if scale == 0.0:
        return False
    for c in range(dim):
        piv = c
        for i in range(c + 1, dim):
            if abs(M[i, c]) > abs(M[piv, c]):
                piv = i
        if abs(M[piv, c]) <= 1e-13 * scale:
            return False
        if piv != c:
            for j in range(dim + 1):
                tmp = M[c, j]
                M[c, j] = M[piv, j]
                M[piv, j] = tmp
        for i in range(c + 1, dim):
            f = M[i, c] / M[c, c]
            for j in range(c, dim + 1):
                M[i, j] = M[i, j] - f * M[c, j]
    for i in range(dim - 1, -1, -1):
        s = M[i, dim]
        for j in range(i + 1, dim):
            s = s - M[i, j] * out[j]
        out[i] = s / M[i, i]
    return True


@njit(cache=True, nogil=True)
def _shape_values(r, n, beta, lam, dim, N):
    """Fill ``N`` for multiplier ``lam``; return the constraint residual norm.

    The largest exponent is subtracted before exponentiation; the shift
    cancels in the normalisation.
    """
    fmax = -np.inf
    for i in range(n):
        sq = 0.0
        lr = 0.0
        for d in range(dim):
            sq = sq + r[i, d] * r[i, d]
            lr = lr + lam[d] * r[i, d]
        f = -beta * sq + lr
        N[i] = f
        if f > fmax:
            fmax = f
    z = 0.0
    for i in range(n):
        N[i] = math.exp(N[i] - fmax)
        z = z + N[i]
    for i in range(n):
        N[i] = N[i] / z
    res = 0.0
    for d in range(dim):
        s = 0.0
        for i in range(n):
            s = s + N[i] * r[i, d]
        res = res + s * s
    return math.sqrt(res)


@njit(cache=True, nogil=True)
def _jacobian(r, n, N, dim, J, R):
    for d in range(dim):
        s = 0.0
        for i in range(n):
            s = s + N[i] * r[i, d]
        R[d] = s
    for a in range(dim):
        for b in range(dim):
            s = 0.0
            for i in range(n):
                s = s + N[i] * r[i, a] * r[i, b]
            J[a, b] = s - R[a] * R[b]


@njit(cache=True, nogil=True)
def lme_kernel(xp, X, n, beta, dim, tol, max_iter, want_grad, lam, N, B):
    """Solve for the multiplier and evaluate shape values (and gradients).

    ``tol`` is an absolute residual tolerance. ``lam``, ``N`` and ``B`` are
    output buffers (``B`` rows beyond ``dim`` are zeroed). Returns
    ``(status, iterations)``.
    """
    r = np.empty((n, 3))
    for i in range(n):
        for d in range(3):
            r[i, d] = xp[d] - X[i, d]
    for d in range(3):
        lam[d] = 0.0
    J = np.zeros((3, 3))
    R = np.zeros(3)
    step = np.zeros(3)
    trial = np.zeros(3)
    Ntrial = np.empty(n)
    res = _shape_values(r, n, beta, lam, dim, N)
    it = 0
    converged = res <= tol
    while not converged and it < max_iter:
        it += 1
        _jacobian(r, n, N, dim, J, R)
        for d in range(dim):
            R[d] = -R[d]
        if not _solve_small(J, R, step, dim):
            return LME_SINGULAR, it
        t = 1.0
        accepted = False
        for _ in range(_MAX_HALVINGS):
            for d in range(dim):
                trial[d] = lam[d] + t * step[d]
            rt = _shape_values(r, n, beta, trial, dim, Ntrial)
            if rt < res:
                accepted = True
                break
            t = 0.5 * t
        if not accepted:
            return LME_NOT_CONVERGED, it
        for d in range(dim):
            lam[d] = trial[d]
        for i in range(n):
            N[i] = Ntrial[i]
        res = rt
        converged = res <= tol
    if not converged:
        return LME_NOT_CONVERGED, it
    # polish: a couple of full Newton steps, kept only while they help
    for _ in range(_POLISH_STEPS):
        if res == 0.0:
            break
        _jacobian(r, n, N, dim, J, R)
        for d in range(dim):
            R[d] = -R[d]
        if not _solve_small(J, R, step, dim):
            break
        for d in range(dim):
            trial[d] = lam[d] + step[d]
        rt = _shape_values(r, n, beta, trial, dim, Ntrial)
        if rt < res:
            for d in range(dim):
                lam[d] = trial[d]
            for i in range(n):
                N[i] = Ntrial[i]
            res = rt
        else:
            break
    if want_grad:
        _jacobian(r, n, N, dim, J, R)
        col = np.zeros(3)
        rhs = np.zeros(3)
        for i in range(n):
            for d in range(dim):
                rhs[d] = r[i, d]
            if not _solve_small(J, rhs, col, dim):
                return LME_SINGULAR, it
            for d in range(3):
                B[i, d] = -N[i] * col[d] if d < dim else 0.0
    return LME_OK, it


# ---------------------------------------------------------------------------
# Python API
# ---------------------------------------------------------------------------

def _prepare(x_p, node_positions, dim):
    X = np.zeros((len(node_positions), 3))
    pos = np.asarray(node_positions, dtype=float)
    if pos.ndim != 2 or pos.shape[0] == 0:
        raise ValueError("at least one support node is required")
    X[:, : pos.shape[1]] = pos
    xp = np.zeros(3)
    xp[: len(x_p)] = np.asarray(x_p, dtype=float)
    if dim is None:
        dim = pos.shape[1]
    return xp, X, dim


def solve_lambda(x_p, node_positions, beta, *, h=1.0, newton_tol=1e-10,
                 newton_max_iter=50, dim=None):
    """Newton solution of the first-moment constraint.

    Returns ``(lam, N)``. Raises :class:`LmeConvergenceError` when the
    iteration fails, which usually means ``x_p`` is not inside the convex hull
    of the support (the caller should enlarge the support).
    """
    xp, X, dim = _prepare(x_p, node_positions, dim)
    n = X.shape[0]
    lam = np.zeros(3)
    N = np.empty(n)
    B = np.zeros((n, 3))
    status, it = lme_kernel(xp, X, n, float(beta), dim, newton_tol * h,
                            newton_max_iter, False, lam, N, B)
    if status != LME_OK:
        raise LmeConvergenceError(
            f"LME multiplier did not converge after {it} iterations (status {status})")
    return lam[:dim].copy(), N


def evaluate(x_p, node_positions, params: LmeParams, *, dim=None) -> LmeResult:
    """Shape values and spatial gradients at ``x_p``."""
    xp, X, dim = _prepare(x_p, node_positions, dim)
    n = X.shape[0]
    lam = np.zeros(3)
    N = np.empty(n)
    B = np.zeros((n, 3))
    status, it = lme_kernel(xp, X, n, params.beta, dim, params.newton_tol * params.h,
                            params.newton_max_iter, True, lam, N, B)
    if status == LME_SINGULAR:
        raise DegenerateSupportError(
            f"singular LME constraint Jacobian for {n} support nodes in {dim}D")
    if status != LME_OK:
        raise LmeConvergenceError(f"LME multiplier did not converge after {it} iterations")
    return LmeResult(N=N, B=B[:, :dim].copy(), lam=lam[:dim].copy(), iterations=it)
