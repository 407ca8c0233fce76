"""Dense LDL^T factorisation for the pose-graph normal equations.

Right-looking blocked algorithm: each diagonal block is factored column by
column, the panel below it is obtained by one triangular solve and the
trailing matrix is updated with a single matrix product. No pivoting: the
normal equations are symmetric positive definite once damped, and a
non-positive pivot is reported instead of worked around.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular


class NotPositiveDefinite(np.linalg.LinAlgError):
    def __init__(self, index: int, pivot: float):
        super().__init__(f"non-positive pivot {pivot:.3e} at column {index}")
        self.index = index
        self.pivot = pivot


def _ldlt_unblocked(A: np.ndarray, offset: int, tol: float):
    """In-place LDL^T of a small block; returns D, leaves unit-lower L in A."""
    n = A.shape[0]
    d = np.empty(n)
    for j in range(n):
        dj = A[j, j] - np.dot(A[j, :j] * d[:j], A[j, :j])
        if not dj > tol:
            raise NotPositiveDefinite(offset + j, dj)
        d[j] = dj
        if j + 1 < n:
            A[j + 1 :, j] = (A[j + 1 :, j] - A[j + 1 :, :j] @ (d[:j] * A[j, :j])) / dj
    return d


def ldlt_factor(H: np.ndarray, block: int = 64, rtol: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Factor symmetric ``H = L diag(d) L^T``; returns ``(L, d)``.

    Raises :class:`NotPositiveDefinite` if a pivot falls below
    ``rtol * max|diag(H)|``.
    """
    A = np.array(H, dtype=float, copy=True)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    d = np.empty(n)
    scale = float(np.max(np.abs(np.diag(A)))) if n else 0.0
    tol = rtol * scale if scale > 0 else 0.0
    for k in range(0, n, block):
        e = min(n, k + block)
        d[k:e] = _ldlt_unblocked(A[k:e, k:e], k, tol)
        if e < n:
            L11 = A[k:e, k:e]
            # W = A21 L11^{-T}, L21 = W D^{-1}
            W = solve_triangular(L11, A[e:, k:e].T, lower=True, unit_diagonal=True, check_finite=False).T
            L21 = W / d[k:e]
            A[e:, k:e] = L21
            A[e:, e:] -= W @ L21.T
    L = np.tril(A, -1)
    np.fill_diagonal(L, 1.0)
    return L, d


def ldlt_solve(L: np.ndarray, d: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = solve_triangular(L, b, lower=True, unit_diagonal=True, check_finite=False)
    return solve_triangular(L.T, y / d, lower=False, unit_diagonal=True, check_finite=False)


def solve_spd(H: np.ndarray, b: np.ndarray) -> np.ndarray:
    L, d = ldlt_factor(H)
    return ldlt_solve(L, d, b)
