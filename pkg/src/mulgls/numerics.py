"""Dense linear algebra helpers shared by the kernel and embedding code.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
validate their inputs (finite, symmetric where required) and fail loudly, since
every quantity downstream is built on top of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class EigPair:
    """Eigenvalues in descending order with matching orthonormal columns."""

    values: np.ndarray
    vectors: np.ndarray

    @property
    def rank(self) -> int:
        return self.values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise ``ValueError``."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: non-finite entries")
    return m


def check_symmetric(m: np.ndarray, tol: float = SYMMETRY_TOL) -> None:
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"asymmetric: matrix is not square {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if m.size and np.max(np.abs(m - m.T)) > tol * scale:
        raise ValueError("asymmetric: matrix differs from its transpose")


def sym_eig_truncated(m, rank: int) -> EigPair:
    """Top-``rank`` eigenpairs of a symmetric matrix.

    The full decomposition is computed with LAPACK ``syevd`` and then truncated;
    the matrices passed here are small (at most the number of classes on the
    hot path) so there is no point in an iterative partial solver.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite entries in eigendecomposition input")
    check_symmetric(m)
    n = m.shape[0]
    if not 1 <= rank <= n:
        raise ValueError(f"rank must lie in [1, {n}], got {rank}")
    # symmetrise exactly so eigh sees the same matrix regardless of which
    # triangle carries the rounding noise
    values, vectors = np.linalg.eigh(0.5 * (m + m.T))
    order = np.argsort(values, kind="stable")[::-1][:rank]
    return EigPair(values=values[order].copy(), vectors=np.ascontiguousarray(vectors[:, order]))


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a @ x = b`` for symmetric positive definite ``a`` via Cholesky."""
    a = as_matrix(a, "A")
    vec = np.ndim(b) == 1
    b = as_matrix(b, "B")
    check_symmetric(a)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"shape mismatch: A is {a.shape}, B is {b.shape}")
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("not SPD: Cholesky factorisation failed") from exc
    diag = np.diag(factor[0]) ** 2
    if diag.min() <= 1e-14 * diag.max():
        raise np.linalg.LinAlgError("not SPD: matrix is numerically singular")
    x = scipy.linalg.cho_solve(factor, b, check_finite=False)
    return x[:, 0] if vec else x


def max_abs(a) -> float:
    a = np.asarray(a)
    return float(np.max(np.abs(a))) if a.size else 0.0
