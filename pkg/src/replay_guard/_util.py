"""Shared linear-algebra helpers (internal)."""
from __future__ import annotations

import numpy as np
import scipy.linalg


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float array, raising ValueError otherwise."""
    A = np.asarray(M, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    elif A.ndim == 1:
        A = A.reshape(1, -1)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def frozen(A: np.ndarray) -> np.ndarray:
    """Return a read-only copy (value-object fields must not mutate)."""
    B = np.array(A, dtype=float, copy=True)
    B.flags.writeable = False
    return B


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def min_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(sym(M))[0])


def check_symmetric(M: np.ndarray, name: str, rtol: float = 1e-8) -> None:
    scale = max(float(np.abs(M).max()), 1e-300)
    if np.abs(M - M.T).max() > rtol * scale:
        raise ValueError(f"{name} is not symmetric")


def pd_tolerance(M: np.ndarray) -> float:
    # eigenvalue tolerance proportional to the matrix magnitude
    return 1e-10 * max(float(np.abs(M).max()), 1e-300)


def is_pd(M: np.ndarray) -> bool:
    return min_eig(M) > pd_tolerance(M)


def assert_spd(M: np.ndarray, name: str) -> None:
    check_symmetric(M, name)
    if not is_pd(M):
        raise ValueError(f"{name} must be symmetric positive definite "
                         f"(min eigenvalue {min_eig(M):.3e})")


def assert_psd(M: np.ndarray, name: str) -> None:
    check_symmetric(M, name)
    if min_eig(M) < -pd_tolerance(M):
        raise ValueError(f"{name} must be positive semidefinite "
                         f"(min eigenvalue {min_eig(M):.3e})")


def psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix (small negatives clipped)."""
    w, Q = np.linalg.eigh(sym(M))
    w = np.clip(w, 0.0, None)
    return (Q * np.sqrt(w)) @ Q.T


def solve_spd(M: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve M @ X = B for SPD M via Cholesky."""
    c, low = scipy.linalg.cho_factor(sym(M))
    return scipy.linalg.cho_solve((c, low), B)


def inv_spd(M: np.ndarray) -> np.ndarray:
    return sym(solve_spd(M, np.eye(M.shape[0])))


class LyapunovInstabilityError(RuntimeError):
    """Coefficient matrix not Schur stable; the fixed-point sum diverges."""


def dlyap_doubling(A: np.ndarray, M: np.ndarray, tol: float = 1e-14,
                   max_iter: int = 128) -> np.ndarray:
    """Solve X = A X Aᵀ + M by doubling the partial sums Σ_j Aʲ M Aʲᵀ.

    Each round squares the propagator, so after k rounds the partial sum
    covers 2^k terms; convergence is checked on the relative increment.

    Raises:
        LyapunovInstabilityError: if the spectral radius of A is ≥ 1 − 1e-9.
    """
    if np.abs(np.linalg.eigvals(A)).max() >= 1.0 - 1e-9:
        raise LyapunovInstabilityError(
            "spectral radius >= 1 - 1e-9; Lyapunov sum does not converge")
    X = sym(np.asarray(M, dtype=float))
    P = np.asarray(A, dtype=float).copy()
    for _ in range(max_iter):
        X_next = X + P @ X @ P.T
        P = P @ P
        if np.abs(X_next - X).max() <= tol * max(1.0, np.abs(X_next).max()):
            return sym(X_next)
        X = X_next
    return sym(X)
