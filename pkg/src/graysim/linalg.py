"""Dense linear algebra for the Newton solvers.

Vectors and matrices are plain float64 numpy arrays. Systems here are
desk-scale (at most a few hundred unknowns), so a dense LU with partial
pivoting is all we need; there is deliberately no sparse path.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatchError, SingularMatrixError

# Pivot magnitudes below this are treated as a structurally singular matrix.
PIVOT_TOL = 1e-14


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise DimensionMismatchError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def inf_norm(v) -> float:
    """Max absolute entry; 0.0 for an empty vector."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return 0.0
    return float(np.max(np.abs(v)))


def lu_factor(a) -> tuple[np.ndarray, np.ndarray]:
    """LU-factorize a square matrix in place of a copy, with partial pivoting.

    Returns (lu, perm) where lu packs L (unit diagonal, below) and U (on and
    above the diagonal) and perm[k] is the source row of pivot row k.
    Raises SingularMatrixError when the best available pivot is below
    PIVOT_TOL in magnitude.
    """
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise DimensionMismatchError(f"matrix must be square, got {n}x{m}")
    lu = a.copy()
    perm = np.arange(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) < PIVOT_TOL:
            raise SingularMatrixError(
                f"pivot {abs(lu[p, k]):.3e} below {PIVOT_TOL:g} at column {k}"
            )
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm


def lu_solve_factored(lu: np.ndarray, perm: np.ndarray, b) -> np.ndarray:
    """Solve using a factorization from lu_factor."""
    b = as_vector(b)
    n = lu.shape[0]
    if b.shape[0] != n:
        raise DimensionMismatchError(f"rhs length {b.shape[0]} != matrix size {n}")
    x = b[perm].copy()
    for k in range(1, n):  # forward substitution, unit lower triangle
        x[k] -= lu[k, :k] @ x[:k]
    for k in range(n - 1, -1, -1):  # back substitution
        x[k] = (x[k] - lu[k, k + 1:] @ x[k + 1:]) / lu[k, k]
    return x


def lu_solve(a, b) -> np.ndarray:
    """Solve A x = b by dense LU with partial pivoting."""
    lu, perm = lu_factor(a)
    return lu_solve_factored(lu, perm, b)
