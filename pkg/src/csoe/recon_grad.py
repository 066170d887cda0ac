"""Backpropagation through the sparse reconstruction layer.

The layer maps a code ``x`` to the minimiser ``a`` of
``0.5 * ||D a - x||^2 + lam * ||a||_1``. Differentiating the optimality
condition of the smoothed problem and letting the smoothing vanish gives
rules that only involve the support ``p`` of ``a``:

    dx       = D[:, p] G^{-1} da[p]
    dD[:, p] = (x - D a) da[p]^T G^{-1} - D[:, p] G^{-1} da[p] a[p]^T
    dD[:, q] = 0

with ``G = D[:, p]^T D[:, p]``. Dropping ``G^{-1}`` gives the cheaper
batch rules of :func:`backprop_approx`.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import SingularSupportError

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class SupportSplit:
    p: np.ndarray
    q: np.ndarray
    tol: float


def support_set(a, tol=None):
    """Split indices into support ``p`` (``|a_i| > tol``) and complement ``q``.

    The default ``tol`` is ``1e-6 * max|a|``; LISTA outputs contain exact
    zeros, so ``tol=0`` is also meaningful.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    if tol is None:
        tol = 1e-6 * float(np.max(np.abs(a))) if a.size else 0.0
    if tol < 0:
        raise ValueError("tol must be non-negative")
    mask = np.abs(a) > tol
    return SupportSplit(np.flatnonzero(mask), np.flatnonzero(~mask), float(tol))


def smoothed_l1_grad_hess(a, eps):
    """Gradient and Hessian diagonal of ``sum_i sqrt(a_i^2 + eps^2)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    a = np.asarray(a, dtype=np.float64)
    r2 = a * a + eps * eps
    root = np.sqrt(r2)
    return a / root, 1.0 / root - a * a / (r2 * root)


def _matrix(D):
    return np.asarray(getattr(D, "values", D), dtype=np.float64)


def _gram_solver(Dp, ridge=False):
    """Return ``rhs -> G^{-1} rhs`` for ``G = Dp^T Dp`` via Cholesky.

    Raises :class:`SingularSupportError` when the support is larger than
    ``m`` or ``G`` is too ill-conditioned, unless ``ridge`` is set, in which
    case ``1e-10 * trace(G) / |p|`` is added to the diagonal instead.
    """
    m, k = Dp.shape
    G = Dp.T @ Dp
    if k > m and not ridge:
        raise SingularSupportError(f"support size {k} exceeds m={m}")
    cond = np.linalg.cond(G) if k else 1.0
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        if not ridge:
            raise SingularSupportError(f"support Gram matrix condition {cond:.3g} > {MAX_CONDITION:g}",
                                       {"support_size": k, "condition": float(cond)})
        G = G + np.eye(k) * (1e-10 * np.trace(G) / k)
    factor = cho_factor(G)
    return lambda rhs: cho_solve(factor, rhs)


def backprop_exact_dx(D, a, delta_a, split=None, ridge=False):
    D = _matrix(D)
    split = split or support_set(a)
    p = split.p
    if p.size == 0:
        return np.zeros(D.shape[0])
    solve = _gram_solver(D[:, p], ridge)
    return D[:, p] @ solve(np.asarray(delta_a, dtype=np.float64)[p])


def backprop_exact_dD(D, a, x, delta_a, split=None, ridge=False):
    D = _matrix(D)
    a = np.asarray(a, dtype=np.float64)
    split = split or support_set(a)
    p = split.p
    out = np.zeros_like(D)
    if p.size == 0:
        return out
    Dp = D[:, p]
    v = _gram_solver(Dp, ridge)(np.asarray(delta_a, dtype=np.float64)[p])
    residual = np.asarray(x, dtype=np.float64) - D @ a
    out[:, p] = np.outer(residual, v) - np.outer(Dp @ v, a[p])
    return out


def backprop_approx(D, a_hat, x_hat, delta_a, split=None):
    """Batch-friendly rules with ``G^{-1}`` replaced by the identity.

    Accepts single vectors or matrices whose columns are independent
    problems; for matrices the support of each column is its nonzero
    pattern (LISTA produces exact zeros). Returns ``(dx, dD)`` where ``dD``
    is summed over columns.
    """
    D = _matrix(D)
    a_hat = np.asarray(a_hat, dtype=np.float64)
    delta_a = np.asarray(delta_a, dtype=np.float64)
    residual = np.asarray(x_hat, dtype=np.float64) - D @ a_hat
    if a_hat.ndim == 1:
        # same operation order as the exact rules, so G = I reproduces them bitwise
        p = (split or support_set(a_hat)).p
        dD = np.zeros_like(D)
        if p.size == 0:
            return np.zeros(D.shape[0]), dD
        Dp, v = D[:, p], delta_a[p]
        dx = Dp @ v
        dD[:, p] = np.outer(residual, v) - np.outer(dx, a_hat[p])
        return dx, dD
    mask = a_hat != 0
    da_p = np.where(mask, delta_a, 0.0)
    dx = D @ da_p
    dD = residual @ da_p.T - dx @ np.where(mask, a_hat, 0.0).T
    return dx, dD
