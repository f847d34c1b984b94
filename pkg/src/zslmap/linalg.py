"""Symmetric eigendecomposition, the structured Sylvester solve and ridge solves.

The Sylvester equation handled here is

    L @ W @ T + mu * W = N

with ``L`` symmetric PSD, ``T`` symmetric PD and ``mu > 0``. Diagonalising
``L = U diag(l) U'`` and ``T = V diag(t) V'`` turns it into an entrywise
division in the rotated basis:  ``What_ij = Nhat_ij / (l_i t_j + mu)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from zslmap.errors import DefinitenessError, DimensionError

SYMMETRY_RTOL = 1e-10
PSD_SLACK = 1e-10
PD_FLOOR = 1e-12


@dataclass(frozen=True)
class SymmetricEigen:
    basis: np.ndarray
    eigenvalues: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.basis * self.eigenvalues) @ self.basis.T


def _check_square(M: np.ndarray, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    return M


def sym_eigen(M, name: str = "matrix") -> SymmetricEigen:
    """Eigendecomposition of a real symmetric matrix, eigenvalues ascending."""
    M = _check_square(M, name)
    scale = max(1.0, float(np.linalg.norm(M)))
    if np.linalg.norm(M - M.T) > SYMMETRY_RTOL * scale:
        raise DimensionError(f"{name} is not symmetric")
    try:
        w, v = np.linalg.eigh(0.5 * (M + M.T))
    except np.linalg.LinAlgError as exc:
        raise DefinitenessError(f"eigendecomposition of {name} failed: {exc}") from None
    return SymmetricEigen(basis=v, eigenvalues=w)


@dataclass(frozen=True)
class SylvesterFactor:
    """Cached eigendecompositions of ``L`` and ``T`` for repeated solves.

    Immutable; ``solve`` may be called concurrently with distinct ``N``.
    """

    left: SymmetricEigen
    right: SymmetricEigen

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.basis.shape[0], self.right.basis.shape[0]

    def solve(self, N, mu: float) -> np.ndarray:
        N = np.asarray(N, dtype=np.float64)
        if N.shape != self.shape:
            raise DimensionError(f"N has shape {N.shape}, expected {self.shape}")
        if not mu > 0:
            raise DefinitenessError(f"mu must be positive, got {mu}")
        U, V = self.left.basis, self.right.basis
        denom = np.outer(self.left.eigenvalues, self.right.eigenvalues) + mu
        W_hat = (U.T @ N @ V) / denom
        return U @ W_hat @ V.T


def factor_left(L) -> SymmetricEigen:
    """Eigendecomposition of a PSD ``L``; tiny negative eigenvalues are clamped to 0."""
    eig = sym_eigen(L, "L")
    w = eig.eigenvalues
    slack = PSD_SLACK * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and w.min() < -slack:
        raise DefinitenessError(f"L is not positive semi-definite (min eigenvalue {w.min():.3e})")
    return SymmetricEigen(eig.basis, np.maximum(w, 0.0))


def factor_right(T) -> SymmetricEigen:
    eig = sym_eigen(T, "T")
    if eig.eigenvalues.size and eig.eigenvalues.min() <= PD_FLOOR:
        raise DefinitenessError(
            f"T is not positive definite (min eigenvalue {eig.eigenvalues.min():.3e})"
        )
    return eig


def factor_sylvester(L, T) -> SylvesterFactor:
    return SylvesterFactor(factor_left(L), factor_right(T))


def solve_special_sylvester(L, T, N, mu: float) -> np.ndarray:
    """Solve ``L W T + mu W = N`` for symmetric PSD ``L``, symmetric PD ``T``, ``mu > 0``.

    For repeated solves with the same ``L`` and ``T`` use
    :func:`factor_sylvester` and :meth:`SylvesterFactor.solve`.
    """
    if not mu > 0:
        raise DefinitenessError(f"mu must be positive, got {mu}")
    L = _check_square(L, "L")
    T = _check_square(T, "T")
    N = np.asarray(N, dtype=np.float64)
    if N.shape != (L.shape[0], T.shape[0]):
        raise DimensionError(f"N has shape {N.shape}, expected {(L.shape[0], T.shape[0])}")
    return factor_sylvester(L, T).solve(N, mu)


def sylvester_kron_oracle(L, T, N, mu: float) -> np.ndarray:
    """Dense reference solve of ``(T' kron L + mu I) vec(W) = vec(N)``.

    ``vec`` stacks columns, so ``vec(L W T) = (T' kron L) vec(W)``. Cost is
    cubic in ``n*m``; meant for checking small instances only.
    """
    L = np.asarray(L, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    n, m = N.shape
    K = np.kron(T.T, L) + mu * np.eye(n * m)
    w = np.linalg.solve(K, N.reshape(-1, order="F"))
    return w.reshape((n, m), order="F")


def ridge_solve(G, B) -> np.ndarray:
    """``G^{-1} B`` for symmetric positive definite ``G`` via Cholesky."""
    G = _check_square(G, "G")
    B = np.asarray(B, dtype=np.float64)
    if B.shape[0] != G.shape[0]:
        raise DimensionError(f"B has {B.shape[0]} rows, G is {G.shape[0]}x{G.shape[0]}")
    scale = max(1.0, float(np.linalg.norm(G)))
    if np.linalg.norm(G - G.T) > SYMMETRY_RTOL * scale:
        raise DimensionError("G is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(G, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise DefinitenessError("G is singular or indefinite") from None
    return scipy.linalg.cho_solve(factor, B, check_finite=False)
