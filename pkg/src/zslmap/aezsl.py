"""Category-specific mappings learnt by similarity-weighted block coordinate descent.

For every target category ``c`` a mapping ``W_c`` (``d x a``) is fitted to the
seen-category tasks, with task ``k`` weighted by the cosine similarity
``s_c[k]`` between the target and seen semantic vectors. The objective is

    1/2 sum_c ||(X' W_c A - Y) S_c||^2 + lam1/2 sum_c ||X' W_c||^2
      + lam2/2 sum_c ||W_c||^2 + lam3/2 sum_{c<e} ||W_c - W_e||^2

and each block update is the Sylvester equation ``L W_c T_c + mu W_c = N_c``
with ``L = X X'``, ``T_c = A S_c^2 A' + lam1 I``, ``mu = (C-1) lam3 + lam2``
and ``N_c = X Y S_c^2 A' + lam3 sum_{e != c} W_e``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from zslmap.errors import DefinitenessError, DimensionError
from zslmap.eszsl import eszsl_mapping
from zslmap.linalg import SymmetricEigen, factor_left, factor_right, factor_sylvester
from zslmap.matio import ZslDataset

logger = logging.getLogger(__name__)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionError(f"vectors differ in length: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity undefined for a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _unit_columns(A: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm semantic vector in {name} (column {int(np.argmin(norms))})")
    return A / norms


def cosine_matrix(A, B) -> np.ndarray:
    """``A.shape[1] x B.shape[1]`` matrix of column cosine similarities."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise DimensionError("semantic matrices differ in dimension")
    return np.clip(_unit_columns(A, "A").T @ _unit_columns(B, "B"), -1.0, 1.0)


@dataclass(frozen=True)
class SimilarityWeights:
    """Row ``c`` holds the diagonal of ``S_c``: cosines of target ``c`` to every seen category.

    Negative cosines are kept; they enter the objective only squared.
    """

    values: np.ndarray

    @property
    def n_targets(self) -> int:
        return self.values.shape[0]

    @property
    def n_seen(self) -> int:
        return self.values.shape[1]


def build_similarity(seen_semantics, target_semantics) -> SimilarityWeights:
    values = cosine_matrix(target_semantics, seen_semantics)
    values.setflags(write=False)
    return SimilarityWeights(values)


@dataclass(frozen=True)
class AezslModel:
    mappings: np.ndarray  # (C, d, a)
    classifiers: np.ndarray  # (d, C)
    lambda1: float
    lambda2: float
    lambda3: float
    objective_trace: tuple = ()
    update_trace: tuple = ()
    n_sweeps: int = 0
    converged: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def n_categories(self) -> int:
        return self.mappings.shape[0]


def aezsl_objective(mappings, X, Y, A, S, lambda1, lambda2, lambda3) -> float:
    """Value of the full objective for stacked ``mappings`` of shape ``(C, d, a)``."""
    total = 0.0
    XtW_sq = 0.0
    for W, s in zip(mappings, S):
        XtW = X.T @ W
        R = (XtW @ A - Y) * s
        total += 0.5 * np.sum(R * R)
        XtW_sq += np.sum(XtW * XtW)
    C = len(mappings)
    sq_norms = float(np.sum(mappings**2))
    # sum_{c<e} ||W_c - W_e||^2 = C sum_c ||W_c - mean||^2
    pair = C * float(np.sum((mappings - mappings.mean(axis=0)) ** 2)) if C else 0.0
    return float(total + 0.5 * lambda1 * XtW_sq + 0.5 * lambda2 * sq_norms + 0.5 * lambda3 * pair)


def _solve_eigen(left: SymmetricEigen, right: SymmetricEigen, N, mu: float) -> np.ndarray:
    # pseudo-inverse on exactly-singular entries (mu == 0 with a null direction of L)
    U, V = left.basis, right.basis
    denom = np.outer(left.eigenvalues, right.eigenvalues) + mu
    rhs = U.T @ N @ V
    W_hat = np.divide(rhs, denom, out=np.zeros_like(rhs), where=denom > 1e-300)
    return U @ W_hat @ V.T


def fit_mappings(
    X,
    Y,
    A,
    S,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    lambda3: float = 1.0,
    max_sweeps: int = 100,
    tol: float = 1e-6,
    init_gamma: float = 1.0,
    init_lambda: float = 1.0,
    consensus_step: bool = True,
    init=None,
):
    """Block coordinate descent over the target mappings.

    Parameters
    ----------
    X, Y, A
        Seen features (``d x n``), one-hot labels (``n x C_s``), seen semantics (``a x C_s``).
    S
        ``C x C_s`` task weights, one row per target category.
    consensus_step
        After each sweep, also minimise exactly over a shift applied to all
        mappings at once. The co-regulariser is blind to such shifts, so the
        step keeps the descent monotone while removing the slow mode that
        otherwise stalls the sweep for large ``lambda3``.
    tol
        Stop once a sweep lowers the objective by less than this relative
        amount; ``tol <= 0`` always runs ``max_sweeps`` sweeps.
    init
        Optional ``(C, d, a)`` starting point; defaults to the ESZSL mapping
        replicated for every target.

    Returns
    -------
    mappings, objective_trace, update_trace, n_sweeps, converged
    """
    X, Y, A, S = (np.asarray(M, dtype=np.float64) for M in (X, Y, A, S))
    d, n = X.shape
    a, c_s = A.shape
    C = S.shape[0]
    if Y.shape != (n, c_s) or S.shape[1] != c_s:
        raise DimensionError("labels / similarity weights do not match the seen categories")
    if lambda1 <= 0:
        raise DefinitenessError("lambda1 must be positive so that T is positive definite")
    if lambda2 < 0 or lambda3 < 0:
        raise ValueError("lambda2 and lambda3 must be nonnegative")
    mu = (C - 1) * lambda3 + lambda2
    if C and not mu > 0:
        raise DefinitenessError(f"mu = (C-1)*lambda3 + lambda2 must be positive, got {mu}")

    if init is None:
        W0 = eszsl_mapping(X, Y, A, init_gamma, init_lambda)
        mappings = np.repeat(W0[None], C, axis=0)
    else:
        mappings = np.array(init, dtype=np.float64)
        if mappings.shape != (C, d, a):
            raise DimensionError(f"init has shape {mappings.shape}, expected {(C, d, a)}")
    if C == 0:
        return mappings, (), (), 0, True

    L_eig = factor_left(X @ X.T)
    XY = X @ Y
    weights_sq = S * S
    T_mats, T_eigs, base_N = [], [], []
    for c in range(C):
        T_c = (A * weights_sq[c]) @ A.T + lambda1 * np.eye(a)
        T_mats.append(T_c)
        T_eigs.append(factor_right(T_c))
        base_N.append(XY * weights_sq[c] @ A.T)
    T_mean_eig = factor_right(sum(T_mats) / C)
    L = X @ X.T

    def objective():
        return aezsl_objective(mappings, X, Y, A, S, lambda1, lambda2, lambda3)

    obj = objective()
    sweep_trace = [obj]
    update_trace = [obj]
    converged = False
    sweeps = 0
    total = mappings.sum(axis=0)
    for sweeps in range(1, max_sweeps + 1):
        for c in range(C):
            others = total - mappings[c]
            N = base_N[c] + lambda3 * others
            W_new = _solve_eigen(L_eig, T_eigs[c], N, mu)
            total = others + W_new
            mappings[c] = W_new
            update_trace.append(objective())
        if consensus_step and C > 1 and lambda3 > 0:
            G = np.zeros((d, a))
            for c in range(C):
                G += base_N[c] - L @ mappings[c] @ T_mats[c]
            G = G / C - lambda2 * total / C
            shift = _solve_eigen(L_eig, T_mean_eig, G, lambda2)
            mappings += shift[None]
            total = mappings.sum(axis=0)
            update_trace.append(objective())
        new_obj = update_trace[-1]
        sweep_trace.append(new_obj)
        decrease = (obj - new_obj) / max(abs(obj), np.finfo(float).tiny)
        obj = new_obj
        logger.debug("sweep %d objective %.12g (relative decrease %.3e)", sweeps, obj, decrease)
        if tol > 0 and decrease < tol:
            converged = True
            break
    return mappings, tuple(sweep_trace), tuple(update_trace), sweeps, converged


def extract_classifiers(model_or_mappings, semantics) -> np.ndarray:
    """Stack ``p_c = W_c a_c`` into a ``d x C`` classifier matrix."""
    mappings = getattr(model_or_mappings, "mappings", model_or_mappings)
    mappings = np.asarray(mappings, dtype=np.float64)
    semantics = np.asarray(semantics, dtype=np.float64)
    if mappings.ndim != 3 or semantics.shape != (mappings.shape[2], mappings.shape[0]):
        raise DimensionError(
            f"semantics of shape {semantics.shape} do not match {mappings.shape[0]} mappings "
            f"of shape {mappings.shape[1:]}"
        )
    return np.einsum("cda,ac->dc", mappings, semantics)


def fit_aezsl(
    dataset: ZslDataset,
    weights: SimilarityWeights | None = None,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    lambda3: float = 1.0,
    max_sweeps: int = 100,
    tol: float = 1e-6,
    **kwargs,
) -> AezslModel:
    """Fit one mapping per unseen category of ``dataset``.

    ``weights`` defaults to cosine similarities between unseen and seen
    semantics. Extra keyword arguments go to :func:`fit_mappings`.
    """
    if weights is None:
        weights = build_similarity(dataset.seen_semantics, dataset.unseen_semantics)
    if weights.n_targets != dataset.n_unseen_classes or weights.n_seen != dataset.n_seen_classes:
        raise DimensionError("similarity weights do not match the dataset's categories")
    mappings, trace, updates, sweeps, converged = fit_mappings(
        dataset.seen_features,
        dataset.seen_labels,
        dataset.seen_semantics,
        weights.values,
        lambda1,
        lambda2,
        lambda3,
        max_sweeps=max_sweeps,
        tol=tol,
        **kwargs,
    )
    return _freeze_model(mappings, dataset.unseen_semantics, lambda1, lambda2, lambda3, trace, updates, sweeps, converged)


def _freeze_model(mappings, semantics, lambda1, lambda2, lambda3, trace, updates, sweeps, converged) -> AezslModel:
    P = extract_classifiers(mappings, semantics)
    mappings.setflags(write=False)
    P.setflags(write=False)
    return AezslModel(
        mappings=mappings,
        classifiers=P,
        lambda1=float(lambda1),
        lambda2=float(lambda2),
        lambda3=float(lambda3),
        objective_trace=trace,
        update_trace=updates,
        n_sweeps=sweeps,
        converged=converged,
    )


def block_residual(mappings, c: int, X, Y, A, S, lambda1, lambda2, lambda3) -> float:
    """Relative residual of block ``c``'s stationarity equation with the other blocks fixed."""
    C = len(mappings)
    s2 = S[c] ** 2
    L = X @ X.T
    T = (A * s2) @ A.T + lambda1 * np.eye(A.shape[0])
    others = mappings.sum(axis=0) - mappings[c]
    N = (X @ Y * s2) @ A.T + lambda3 * others
    mu = (C - 1) * lambda3 + lambda2
    res = L @ mappings[c] @ T + mu * mappings[c] - N
    return float(np.linalg.norm(res) / max(1.0, np.linalg.norm(N)))


def consensus_mapping(X, Y, A, S, lambda1: float, lambda2: float) -> np.ndarray:
    """The single mapping all blocks collapse to as ``lambda3`` grows without bound.

    Seen task ``k`` is weighted by ``sqrt(mean_c s_c[k]^2)``; the minimiser of
    the resulting weighted single-mapping problem is one Sylvester solve.
    """
    X, Y, A, S = (np.asarray(M, dtype=np.float64) for M in (X, Y, A, S))
    w2 = np.mean(S * S, axis=0)
    T = (A * w2) @ A.T + lambda1 * np.eye(A.shape[0])
    N = (X @ Y * w2) @ A.T
    return factor_sylvester(X @ X.T, T).solve(N, lambda2)
