"""Closed-form bilinear compatibility model (ESZSL).

Minimises

    ||X' W A - Y||^2 + gamma ||W A||^2 + lam ||X' W||^2 + gamma*lam ||W||^2

over ``W`` (``d x a``), whose minimiser factorises as

    W = (X X' + gamma I)^{-1} X Y A' (A A' + lam I)^{-1}.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from zslmap.errors import DimensionError
from zslmap.linalg import ridge_solve
from zslmap.matio import ZslDataset


@dataclass(frozen=True)
class EszslModel:
    mapping: np.ndarray
    gamma: float
    lam: float

    @property
    def beta(self) -> float:
        return self.gamma * self.lam


def eszsl_mapping(X, Y, A, gamma: float, lam: float) -> np.ndarray:
    X, Y, A = (np.asarray(M, dtype=np.float64) for M in (X, Y, A))
    d, n = X.shape
    a, C = A.shape
    if Y.shape != (n, C):
        raise DimensionError(f"labels have shape {Y.shape}, expected {(n, C)}")
    if not (gamma > 0 and lam > 0):
        raise ValueError("gamma and lambda must be positive")
    left = ridge_solve(X @ X.T + gamma * np.eye(d), X @ Y @ A.T)
    # right-multiplying by a symmetric inverse == transpose of a left solve
    return ridge_solve(A @ A.T + lam * np.eye(a), left.T).T


def fit_eszsl(dataset: ZslDataset, gamma: float = 1.0, lam: float = 1.0) -> EszslModel:
    W = eszsl_mapping(
        dataset.seen_features, dataset.seen_labels, dataset.seen_semantics, gamma, lam
    )
    W.setflags(write=False)
    return EszslModel(mapping=W, gamma=float(gamma), lam=float(lam))


def eszsl_objective(W, X, Y, A, gamma: float, lam: float, beta: float | None = None) -> float:
    beta = gamma * lam if beta is None else beta
    return float(
        np.sum((X.T @ W @ A - Y) ** 2)
        + gamma * np.sum((W @ A) ** 2)
        + lam * np.sum((X.T @ W) ** 2)
        + beta * np.sum(W**2)
    )


def stationarity_residual(W, X, Y, A, gamma: float, lam: float) -> float:
    """Relative Frobenius residual of the zero-gradient condition at ``W`` (beta = gamma*lam)."""
    d = X.shape[0]
    XX = X @ X.T
    rhs = X @ Y @ A.T
    lhs = (XX + gamma * np.eye(d)) @ W @ A @ A.T + lam * (XX + gamma * np.eye(d)) @ W
    return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), np.finfo(float).tiny))


def predict_compatibility(W, features, semantics) -> np.ndarray:
    """``n x C`` compatibility scores ``X' W A``."""
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(features, dtype=np.float64)
    A = np.asarray(semantics, dtype=np.float64)
    if X.shape[0] != W.shape[0] or W.shape[1] != A.shape[0]:
        raise DimensionError(
            f"cannot score features {X.shape} with mapping {W.shape} and semantics {A.shape}"
        )
    return X.T @ W @ A


def argmax_rows(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest column index."""
    scores = np.asarray(scores)
    if scores.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(scores, axis=1)
