"""Dense float64 matrix helpers backing the closed-form solve.

Matrices are plain 2-D ``numpy.ndarray`` objects. Every function validates
shape and finiteness, copies nothing it does not need to, and keeps no state.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ShapeError, SingularSystemError

JITTER_LADDER = (1e-10, 1e-8, 1e-6)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ShapeError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def spd_solve(a, rhs) -> np.ndarray:
    """Solve ``a @ x = rhs`` for symmetric (near) positive-definite ``a``.

    Cholesky first; on failure the diagonal is loaded with
    ``lam * trace(a) / n`` for each ``lam`` in :data:`JITTER_LADDER`.
    """
    a = as_matrix(a, "a")
    rhs = as_matrix(rhs, "rhs")
    n = a.shape[0]
    if a.shape != (n, n):
        raise ShapeError(f"a must be square, got {a.shape}")
    if rhs.shape[0] != n:
        raise ShapeError(f"rhs has {rhs.shape[0]} rows, expected {n}")
    if n == 0:
        return np.zeros_like(rhs)

    base = np.trace(a) / n
    if not base > 0:
        base = 1.0
    for lam in (0.0, *JITTER_LADDER):
        m = a if lam == 0.0 else a + (lam * base) * np.eye(n)
        try:
            factor = scipy.linalg.cho_factor(m, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        x = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
        if np.all(np.isfinite(x)):
            return x
    raise SingularSystemError(
        f"Cholesky failed on {n}x{n} system even with jitter {JITTER_LADDER[-1]:g}"
    )


def column_stats(m) -> tuple[np.ndarray, float]:
    """Row means across columns and the total squared deviation from them."""
    m = as_matrix(m, "m")
    if m.shape[1] == 0 or m.shape[0] == 0:
        raise ShapeError(f"column_stats needs a nonempty matrix, got {m.shape}")
    means = m.mean(axis=1)
    dev = m - means[:, None]
    return means, float(np.sum(dev * dev))
