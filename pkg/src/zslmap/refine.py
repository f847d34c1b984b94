"""Progressive label refinement of unseen-category classifiers.

The test set is split into a confident part (labels frozen) and an
unconfident part. Each outer iteration moves the ``k`` most confident
unconfident instances across, then re-solves the classifier matrix ``P``
(``d x C``) for

    1/2 ||Xl' P - Yl||^2 + g1/2 ||Xu' P - Yu||_{2,1}
      - g2 tr(Yu S P' Xu) + g3/2 tr(P' Xu H Xu' P)  (+ nu/2 ||P||^2)

by iteratively reweighted least squares on the row-sparse term.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from zslmap.aezsl import cosine_matrix
from zslmap.errors import DefinitenessError, DimensionError
from zslmap.eszsl import argmax_rows
from zslmap.linalg import ridge_solve
from zslmap.matio import one_hot

logger = logging.getLogger(__name__)

ROW_NORM_FLOOR = 1e-10


def softmax_rows(values) -> np.ndarray:
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    shifted = values - values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def confidence(P, x) -> tuple[float, int]:
    """Softmax mass of the top-scoring category for one feature vector."""
    P = np.asarray(P, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).ravel()
    if P.shape[0] != x.size:
        raise DimensionError(f"feature of length {x.size} does not match P {P.shape}")
    scores = x @ P
    label = int(np.argmax(scores))
    return float(softmax_rows(scores)[0, label]), label


def confidences(P, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`confidence` over the columns of ``X``."""
    scores = np.asarray(X, dtype=np.float64).T @ P
    labels = argmax_rows(scores)
    probs = softmax_rows(scores) if scores.shape[0] else np.zeros((0, P.shape[1]))
    return probs[np.arange(labels.size), labels], labels


def build_transition(unseen_semantics) -> np.ndarray:
    """Zero-diagonal cosine similarity matrix between unseen categories."""
    A = np.asarray(unseen_semantics, dtype=np.float64)
    S = cosine_matrix(A, A)
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 0.0)
    return S


def build_laplacian(features, k_nn: int = 7, sigma: float | None = None) -> np.ndarray:
    """Unnormalised graph Laplacian of a symmetrised k-NN heat-kernel graph.

    Each instance (column of ``features``) links to its ``k_nn`` nearest
    other instances (distance ties to the lower index); an edge exists if
    either endpoint selected the other. Edge weights are
    ``exp(-dist^2 / (2 sigma^2))`` where ``sigma`` defaults to the median
    selected-neighbour distance (or 1 when that median is 0).
    """
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[1]
    if n < 2:
        raise ValueError("a Laplacian needs at least 2 instances")
    if not 1 <= k_nn < n:
        raise ValueError(f"k_nn must be in [1, {n - 1}], got {k_nn}")
    sq = np.sum(X * X, axis=0)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X.T @ X, 0.0)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_nn]
    rows = np.repeat(np.arange(n), k_nn)
    cols = order.ravel()
    nbr_d2 = d2[rows, cols]
    if sigma is None:
        med = float(np.median(np.sqrt(nbr_d2)))
        sigma = med if med > 0 else 1.0
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    W = np.zeros((n, n))
    W[rows, cols] = np.exp(-nbr_d2 / (2.0 * sigma**2))
    W = np.maximum(W, W.T)
    return np.diag(W.sum(axis=1)) - W


def refine_objective(P, Xl, Yl, Xu, Yu, S_hat, H, gamma1, gamma2, gamma3, nu: float = 0.0) -> float:
    """The refinement objective at ``P``, including the ``nu/2 ||P||^2`` ridge when ``nu > 0``."""
    val = 0.0
    if Xl.shape[1]:
        val += 0.5 * float(np.sum((Xl.T @ P - Yl) ** 2))
    if Xu.shape[1]:
        XuP = Xu.T @ P
        val += 0.5 * gamma1 * float(np.sum(np.linalg.norm(XuP - Yu, axis=1)))
        val -= gamma2 * float(np.sum((Yu @ S_hat) * XuP))
        val += 0.5 * gamma3 * float(np.sum(XuP * (H @ XuP)))
    return val + 0.5 * nu * float(np.sum(P * P))


def reweight(Q) -> np.ndarray:
    """Diagonal of the IRLS weight matrix: ``1 / (2 max(||q_i||, eps))`` per row of ``Q``."""
    return 1.0 / (2.0 * np.maximum(np.linalg.norm(Q, axis=1), ROW_NORM_FLOOR))


@dataclass
class UpdateResult:
    P: np.ndarray
    objective_trace: list
    n_iter: int
    converged: bool


def update_P(
    Xl,
    Yl,
    Xu,
    Yu,
    S_hat,
    H,
    gamma1: float,
    gamma2: float,
    gamma3: float,
    nu: float = 1e-8,
    max_inner: int = 50,
    tol: float = 1e-8,
    P0=None,
) -> UpdateResult:
    """Alternate the row reweighting and the closed-form ``P`` solve.

    ``P0`` seeds the first reweighting; without it the weights start at
    ``1/2`` per row (i.e. the unweighted least-squares surrogate).
    The trace holds the objective (with the ``nu`` ridge) before the first
    and after every ``P`` solve.
    """
    Xl, Yl, Xu, Yu = (np.asarray(M, dtype=np.float64) for M in (Xl, Yl, Xu, Yu))
    d = Xl.shape[0] if Xl.size or Xl.shape[0] else Xu.shape[0]
    C = S_hat.shape[0]
    if Xu.shape[0] != d or Yl.shape != (Xl.shape[1], C) or Yu.shape != (Xu.shape[1], C):
        raise DimensionError("refinement inputs do not conform")
    if H.shape != (Xu.shape[1], Xu.shape[1]):
        raise DimensionError(f"Laplacian has shape {H.shape}, expected {(Xu.shape[1],) * 2}")
    if min(gamma1, gamma2, gamma3) < 0 or not nu > 0:
        raise ValueError("gammas must be nonnegative and nu positive")

    G_fixed = Xl @ Xl.T + gamma3 * Xu @ H @ Xu.T + nu * np.eye(d)
    B_fixed = Xl @ Yl + gamma2 * Xu @ Yu @ S_hat
    G_fixed = 0.5 * (G_fixed + G_fixed.T)

    def objective(P):
        return refine_objective(P, Xl, Yl, Xu, Yu, S_hat, H, gamma1, gamma2, gamma3, nu)

    if P0 is None:
        D = np.full(Xu.shape[1], 0.5)
        P = None
        trace = []
    else:
        P = np.asarray(P0, dtype=np.float64)
        D = reweight(Xu.T @ P - Yu)
        trace = [objective(P)]

    converged = False
    it = 0
    for it in range(1, max_inner + 1):
        XuD = Xu * D
        G = G_fixed + gamma1 * XuD @ Xu.T
        B = B_fixed + gamma1 * XuD @ Yu
        try:
            P = ridge_solve(0.5 * (G + G.T), B)
        except DefinitenessError:
            raise DefinitenessError("refinement system is singular; increase nu") from None
        obj = objective(P)
        if trace:
            change = abs(trace[-1] - obj) / max(abs(trace[-1]), 1.0)
        else:
            change = np.inf
        trace.append(obj)
        if change < tol:
            converged = True
            break
        if gamma1 == 0 or Xu.shape[1] == 0:
            converged = True
            break
        D = reweight(Xu.T @ P - Yu)
    return UpdateResult(P=P, objective_trace=trace, n_iter=it, converged=converged)


@dataclass
class RefinementState:
    """Single-owner mutable state of the outer refinement loop."""

    confident: list
    unconfident: list
    labels: np.ndarray  # current label per test instance (frozen once confident)
    P: np.ndarray
    iteration: int = 0

    def check(self, n: int) -> None:
        lset, uset = set(self.confident), set(self.unconfident)
        assert not (lset & uset) and (lset | uset) == set(range(n))


@dataclass
class RefinementResult:
    labels: np.ndarray
    P: np.ndarray
    n_iterations: int
    label_history: list = field(default_factory=list)
    inner_traces: list = field(default_factory=list)
    moved: list = field(default_factory=list)


def refine_labels(
    X,
    P_init,
    unseen_semantics,
    k: int,
    gamma1: float = 3.0,
    gamma2: float = 0.01,
    gamma3: float = 0.01,
    k_nn: int = 7,
    nu: float = 1e-8,
    max_inner: int = 50,
    tol: float = 1e-8,
) -> RefinementResult:
    """Grow a confident set ``k`` instances at a time until every test instance is labelled.

    ``X`` is ``d x n`` test features; ``P_init`` the ``d x C`` classifiers
    from the category-specific mappings. Returns final labels (confident-set
    labels for all instances) and the final ``P``; ``label_history[i]``
    holds the full label vector after outer iteration ``i`` (index 0 is the
    initial prediction).
    """
    X = np.asarray(X, dtype=np.float64)
    P = np.array(P_init, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if X.shape[0] != P.shape[0]:
        raise DimensionError(f"features {X.shape} do not match classifiers {P.shape}")
    n, C = X.shape[1], P.shape[1]
    S_hat = build_transition(unseen_semantics)
    if S_hat.shape[0] != C:
        raise DimensionError("unseen semantics do not match the classifier columns")

    _, labels = confidences(P, X)
    state = RefinementState(confident=[], unconfident=list(range(n)), labels=labels.copy(), P=P)
    result = RefinementResult(labels=labels.copy(), P=P, n_iterations=0, label_history=[labels.copy()])

    while state.unconfident:
        unc = np.array(state.unconfident)
        score, current = confidences(state.P, X[:, unc])
        # descending score, ties to the lower instance index
        order = np.lexsort((unc, -score))[:k]
        chosen = unc[order]
        state.labels[chosen] = current[order]
        state.confident.extend(int(i) for i in chosen)
        chosen_set = set(chosen.tolist())
        state.unconfident = [i for i in state.unconfident if i not in chosen_set]
        state.iteration += 1

        lidx = np.array(state.confident, dtype=np.int64)
        uidx = np.array(state.unconfident, dtype=np.int64)
        Xl, Xu = X[:, lidx], X[:, uidx]
        Yl, Yu = one_hot(state.labels[lidx], C), one_hot(state.labels[uidx], C)
        if uidx.size >= 2:
            H = build_laplacian(Xu, min(k_nn, uidx.size - 1))
        else:
            H = np.zeros((uidx.size, uidx.size))
        upd = update_P(Xl, Yl, Xu, Yu, S_hat, H, gamma1, gamma2, gamma3, nu, max_inner, tol, P0=state.P)
        state.P = upd.P
        result.inner_traces.append(upd.objective_trace)
        result.moved.append(chosen.tolist())
        result.label_history.append(state.labels.copy())
        logger.debug("iteration %d: |L|=%d |U|=%d inner=%d", state.iteration, lidx.size, uidx.size, upd.n_iter)

    result.labels = state.labels.copy()
    result.P = state.P
    result.n_iterations = state.iteration
    return result


def refine_one_step(
    X, P_init, unseen_semantics, gamma1=3.0, gamma2=0.01, gamma3=0.01, k_nn=7, nu=1e-8, max_inner=50, tol=1e-8
):
    """Non-progressive variant: every instance unconfident, no confident-set term.

    Returns ``(labels, P)`` where labels are the argmax under the updated ``P``.
    """
    X = np.asarray(X, dtype=np.float64)
    P0 = np.asarray(P_init, dtype=np.float64)
    n, C = X.shape[1], P0.shape[1]
    S_hat = build_transition(unseen_semantics)
    _, labels = confidences(P0, X)
    H = build_laplacian(X, min(k_nn, n - 1)) if n >= 2 else np.zeros((n, n))
    empty = np.zeros((X.shape[0], 0))
    upd = update_P(empty, np.zeros((0, C)), X, one_hot(labels, C), S_hat, H, gamma1, gamma2, gamma3, nu, max_inner, tol, P0=P0)
    return argmax_rows(X.T @ upd.P), upd.P
