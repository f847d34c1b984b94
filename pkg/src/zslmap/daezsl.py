"""Feature-mask network over a shared visual-semantic mapping.

A small MLP ``g`` turns a category's semantic vector ``a_c`` into a feature
mask ``m_c`` in ``(0, 1)^d``. Masking the features is the same as adapting
the shared mapping per category, ``W_c = (m_c 1') * W``, so for an instance
``x`` the ``C x C`` decision matrix

    J[c1, c2] = (x * m_c1)' W a_c2

holds the score of category ``c2`` under category ``c1``'s mask. Training
minimises, per instance with label ``y``,

    ||J - 1 e_y'||^2 + sum_{c != y} max(0, J[c, y] - J[y, y] + rho)

where the square term asks every mask to classify the instance and the hinge
asks the true category's own mask to win its column by a margin. Prediction
uses the diagonal of ``J``.

Gradients are derived by hand; :func:`gradient_check` compares them with
central finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from zslmap.errors import DimensionError, ZslError
from zslmap.matio import ZslDataset, load_blocks, make_rng, save_blocks

PARAM_NAMES = ("hidden_weights", "hidden_bias", "output_weights", "output_bias", "mapping")
GRAD_FLOOR = 1e-6
ADAGRAD_EPS = 1e-8


@dataclass(frozen=True)
class DaezslParams:
    """MLP weights (``a x h``, ``h``, ``h x d``, ``d``), mapping ``W`` (``d x a``) and margin.

    With ``fixed_mask`` every mask is all ones and the MLP is ignored.
    """

    hidden_weights: np.ndarray
    hidden_bias: np.ndarray
    output_weights: np.ndarray
    output_bias: np.ndarray
    mapping: np.ndarray
    rho: float = 0.5
    fixed_mask: bool = False

    def __post_init__(self):
        a, h = self.hidden_weights.shape
        d = self.mapping.shape[0]
        if (
            self.hidden_bias.shape != (h,)
            or self.output_weights.shape != (h, d)
            or self.output_bias.shape != (d,)
            or self.mapping.shape != (d, a)
        ):
            raise DimensionError("inconsistent network parameter shapes")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite value in {name}")

    @property
    def d(self) -> int:
        return self.mapping.shape[0]

    @property
    def a(self) -> int:
        return self.mapping.shape[1]

    @property
    def h(self) -> int:
        return self.hidden_bias.size

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_arrays(self, arrays) -> "DaezslParams":
        return replace(self, **{k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


def default_hidden_size(d: int, a: int) -> int:
    return max(1, (d + a) // 2)


def init_params(d: int, a: int, h: int | None = None, rho: float = 0.5, seed: int = 0, rng=None, fixed_mask=False):
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialisation.

    Fan-in is ``a`` for the hidden layer, ``h`` for the output layer and
    ``d`` for the mapping. Draw order: hidden weights, hidden bias, output
    weights, output bias, mapping.
    """
    h = default_hidden_size(d, a) if h is None else h
    rng = make_rng(seed) if rng is None else rng

    def draw(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return DaezslParams(
        hidden_weights=draw((a, h), a),
        hidden_bias=draw((h,), a),
        output_weights=draw((h, d), h),
        output_bias=draw((d,), h),
        mapping=draw((d, a), d),
        rho=float(rho),
        fixed_mask=fixed_mask,
    )


@dataclass
class _Forward:
    pre_hidden: np.ndarray  # h x C
    hidden: np.ndarray  # h x C, after activation and dropout
    drop: np.ndarray | None
    masks: np.ndarray  # d x C


def _mask_forward(params: DaezslParams, semantics: np.ndarray, drop=None) -> _Forward:
    A = np.asarray(semantics, dtype=np.float64)
    if A.shape[0] != params.a:
        raise DimensionError(f"semantics have {A.shape[0]} rows, the network expects {params.a}")
    if params.fixed_mask:
        ones = np.ones((params.d, A.shape[1]))
        return _Forward(np.zeros((params.h, A.shape[1])), np.zeros((params.h, A.shape[1])), None, ones)
    Z1 = params.hidden_weights.T @ A + params.hidden_bias[:, None]
    H = np.maximum(Z1, 0.0)
    if drop is not None:
        H = H * drop
    M = expit(params.output_weights.T @ H + params.output_bias[:, None])
    return _Forward(Z1, H, drop, M)


def generate_masks(params: DaezslParams, semantics) -> np.ndarray:
    """``d x C`` masks, column ``c`` = sigmoid(out(relu(hidden(a_c))))."""
    return _mask_forward(params, semantics).masks


def decision_matrix(x, masks, W, semantics) -> np.ndarray:
    """``J[c1, c2] = (x * m_c1)' W a_c2``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    M = np.asarray(masks, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    A = np.asarray(semantics, dtype=np.float64)
    if M.shape[0] != x.size or W.shape != (x.size, A.shape[0]) or M.shape[1] != A.shape[1]:
        raise DimensionError(
            f"cannot form decision matrix from x {x.shape}, masks {M.shape}, W {W.shape}, semantics {A.shape}"
        )
    return (M * x[:, None]).T @ (W @ A)


def adapted_mappings(masks, W) -> np.ndarray:
    """Per-category mappings ``(m_c 1') * W`` stacked as ``C x d x a``."""
    M = np.asarray(masks, dtype=np.float64)
    return M.T[:, :, None] * np.asarray(W, dtype=np.float64)[None]


def daezsl_loss(J, label: int, rho: float) -> tuple[float, float]:
    """``(square term, hinge term)`` for one instance's decision matrix."""
    J = np.asarray(J, dtype=np.float64)
    C = J.shape[0]
    if J.shape != (C, C):
        raise DimensionError(f"decision matrix must be square, got {J.shape}")
    if not 0 <= label < C:
        raise ValueError(f"label {label} out of range for {C} categories")
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    target = np.zeros(C)
    target[label] = 1.0
    square = float(np.sum((J - target[None, :]) ** 2))
    col = J[:, label]
    margins = np.maximum(0.0, col - col[label] + rho)
    margins[label] = 0.0
    return square, float(margins.sum())


def _batch_decisions(M, X, B) -> np.ndarray:
    """``n x C x C`` decision matrices for the columns of ``X`` (``B = W A``)."""
    return np.einsum("kc,kn,ke->nce", M, X, B, optimize=True)


def batch_loss_and_grads(params: DaezslParams, X, labels, semantics, drop=None, need_grad=True):
    """Summed loss over the columns of ``X`` and its gradient for every parameter.

    Returns ``(loss, square_total, hinge_total, grads)`` where ``grads`` maps
    parameter names to arrays (MLP gradients are zero in fixed-mask mode).
    At a hinge or rectifier kink the zero one-sided derivative is used.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    A = np.asarray(semantics, dtype=np.float64)
    n, C = X.shape[1], A.shape[1]
    if X.shape[0] != params.d or labels.size != n:
        raise DimensionError("features and labels do not match the network")
    if n and (labels.min() < 0 or labels.max() >= C):
        raise ValueError("label out of range")

    fwd = _mask_forward(params, A, drop)
    M = fwd.masks
    B = params.mapping @ A
    J = _batch_decisions(M, X, B)
    rows = np.arange(n)

    resid = J.copy()
    resid[rows, :, labels] -= 1.0
    square = float(np.sum(resid**2))
    col = J[rows, :, labels]  # n x C: column y of each J
    active = (col - col[rows, labels][:, None] + params.rho) > 0
    active[rows, labels] = False
    hinge = float(np.sum(np.where(active, col - col[rows, labels][:, None] + params.rho, 0.0)))
    loss = square + hinge
    if not need_grad:
        return loss, square, hinge, None

    G = 2.0 * resid
    G[rows, :, labels] += active
    G[rows, labels, labels] -= active.sum(axis=1)

    # J_n = M' diag(x_n) B
    dM = np.einsum("kn,ke,nce->kc", X, B, G, optimize=True)
    dB = np.einsum("kn,kc,nce->ke", X, M, G, optimize=True)
    grads = {"mapping": dB @ A.T}
    if params.fixed_mask:
        for name in PARAM_NAMES[:4]:
            grads[name] = np.zeros_like(getattr(params, name))
        return loss, square, hinge, grads

    dZ2 = dM * M * (1.0 - M)
    grads["output_weights"] = fwd.hidden @ dZ2.T
    grads["output_bias"] = dZ2.sum(axis=1)
    dH = params.output_weights @ dZ2
    if drop is not None:
        dH = dH * drop
    dZ1 = dH * (fwd.pre_hidden > 0)
    grads["hidden_weights"] = A @ dZ1.T
    grads["hidden_bias"] = dZ1.sum(axis=1)
    return loss, square, hinge, grads


def numerical_grads(params: DaezslParams, X, labels, semantics, step: float = 1e-5) -> dict:
    """Central finite differences of the summed loss for every parameter entry."""
    arrays = {k: v.astype(np.float64, copy=True) for k, v in params.arrays().items()}
    out = {}
    for name, value in arrays.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = batch_loss_and_grads(params.with_arrays(arrays), X, labels, semantics, need_grad=False)[0]
            flat[i] = orig - step
            down = batch_loss_and_grads(params.with_arrays(arrays), X, labels, semantics, need_grad=False)[0]
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def relative_error(analytic, numeric, floor: float = GRAD_FLOOR) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradient_check(params: DaezslParams, X, labels, semantics, step: float = 1e-5) -> dict:
    """Per-parameter maximum relative error between analytic and numerical gradients.

    The denominator floor is ``GRAD_FLOOR * max(1, |loss|)``: finite
    differences cannot resolve gradient entries much smaller than
    ``machine eps * |loss| / step``, so entries below the floor are compared
    absolutely against it.
    """
    loss, _, _, grads = batch_loss_and_grads(params, X, labels, semantics)
    num = numerical_grads(params, X, labels, semantics, step)
    floor = GRAD_FLOOR * max(1.0, abs(loss))
    names = PARAM_NAMES[4:] if params.fixed_mask else PARAM_NAMES
    return {name: relative_error(grads[name], num[name], floor) for name in names}


@dataclass
class TrainResult:
    params: DaezslParams
    loss_trace: list = field(default_factory=list)  # summed batch loss before each step
    epoch_losses: list = field(default_factory=list)  # mean per-instance loss over each epoch


def train_daezsl(
    dataset: ZslDataset,
    epochs: int = 50,
    batch_size: int = 16,
    learning_rate: float = 0.01,
    rho: float = 0.5,
    seed: int = 0,
    hidden_size: int | None = None,
    fixed_mask: bool = False,
    dropout: float = 0.0,
    init: DaezslParams | None = None,
) -> TrainResult:
    """Mini-batch Adagrad on the summed loss averaged over each batch.

    Randomness (initialisation, then per epoch a shuffle followed by the
    dropout masks of each batch) comes from one generator seeded by ``seed``.
    Dropout, when ``dropout > 0``, zeroes hidden units of the mask network
    with that probability and rescales the survivors.
    """
    if epochs < 0 or batch_size < 1 or learning_rate < 0:
        raise ValueError("epochs, batch_size and learning_rate must be nonnegative (batch_size >= 1)")
    if not 0 <= dropout < 1:
        raise ValueError("dropout must be in [0, 1)")
    rng = make_rng(seed)
    if init is None:
        params = init_params(dataset.d, dataset.a, hidden_size, rho, rng=rng, fixed_mask=fixed_mask)
    else:
        params = replace(init, rho=float(rho), fixed_mask=fixed_mask)
    X = dataset.seen_features
    y = dataset.seen_label_indices
    A = dataset.seen_semantics
    n = X.shape[1]

    arrays = {k: v.copy() for k, v in params.arrays().items()}
    accum = {k: np.zeros_like(v) for k, v in arrays.items()}
    trainable = PARAM_NAMES[4:] if fixed_mask else PARAM_NAMES
    result = TrainResult(params=params)

    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            drop = None
            if dropout > 0 and not fixed_mask:
                keep = rng.random((params.h, A.shape[1])) >= dropout
                drop = keep / (1.0 - dropout)
            current = params.with_arrays(arrays)
            # divergence is detected below; no need for numpy's overflow warnings
            with np.errstate(over="ignore", invalid="ignore"):
                loss, _, _, grads = batch_loss_and_grads(current, X[:, idx], y[idx], A, drop)
            if not math.isfinite(loss):
                raise ZslError("non-finite training loss; lower the learning rate")
            result.loss_trace.append(loss)
            total += loss
            for name in trainable:
                g = grads[name] / idx.size
                accum[name] += g * g
                arrays[name] -= learning_rate * g / (np.sqrt(accum[name]) + ADAGRAD_EPS)
                if not np.all(np.isfinite(arrays[name])):
                    raise ZslError("non-finite parameters during training; lower the learning rate")
        result.epoch_losses.append(total / max(n, 1))
    result.params = params.with_arrays(arrays)
    return result


def diagonal_scores(params: DaezslParams, features, semantics) -> np.ndarray:
    """``n x C`` scores ``J[c, c] = (x * m_c)' W a_c`` for each column ``x`` of ``features``."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != params.d:
        raise DimensionError(f"features have {X.shape[0]} rows, the network expects {params.d}")
    A = np.asarray(semantics, dtype=np.float64)
    M = generate_masks(params, A)
    return X.T @ (M * (params.mapping @ A))


def predict_daezsl(params: DaezslParams, features, semantics) -> np.ndarray:
    """Argmax of the decision-matrix diagonal, lowest index on ties."""
    scores = diagonal_scores(params, features, semantics)
    if scores.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(scores, axis=1)


def save_params(path, params: DaezslParams) -> None:
    """Checkpoint as CSV blocks: header with ``h``, ``d``, ``a``, then the five arrays in fixed order."""
    meta = {"h": params.h, "d": params.d, "a": params.a, "rho": params.rho, "fixed_mask": params.fixed_mask}
    blocks = {}
    for name in PARAM_NAMES:
        v = getattr(params, name)
        blocks[name] = v[None, :] if v.ndim == 1 else v
    save_blocks(path, "daezsl", meta, blocks)


def load_params(path) -> DaezslParams:
    method, meta, blocks = load_blocks(path)
    if method != "daezsl":
        raise ZslError(f"{path} holds a {method} model, not daezsl")
    return load_params_from_blocks(meta, blocks)


def load_params_from_blocks(meta, blocks) -> DaezslParams:
    missing = [n for n in PARAM_NAMES if n not in blocks]
    if missing:
        raise ZslError(f"checkpoint is missing blocks: {', '.join(missing)}")
    return DaezslParams(
        hidden_weights=blocks["hidden_weights"],
        hidden_bias=blocks["hidden_bias"].ravel(),
        output_weights=blocks["output_weights"],
        output_bias=blocks["output_bias"].ravel(),
        mapping=blocks["mapping"],
        rho=float(meta.get("rho", 0.5)),
        fixed_mask=bool(meta.get("fixed_mask", False)),
    )
