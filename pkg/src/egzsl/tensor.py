"""Dense numerical kernel: linear scores, restricted softmax, analytic loss
gradients and a bias-corrected Adam step.

Matrices are plain ``numpy`` float64 arrays. Every gradient here is derived by
hand for the linear score ``s_y = W_y . x``; there is no autodiff.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError, ShapeError

# probabilities are floored here before any log
PROB_FLOOR = 1e-30
_LOG_FLOOR = np.log(PROB_FLOOR)


def as_matrix(a, name="matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _check_features(W: np.ndarray, X: np.ndarray) -> None:
    if W.ndim != 2:
        raise ShapeError(f"weights must be 2-D, got shape {W.shape}")
    if X.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"feature length {X.shape[-1]} does not match weight columns {W.shape[1]}"
        )


def scores(W, x) -> np.ndarray:
    """Per-class compatibility ``W @ x``.

    ``x`` may be a single vector (returns a vector of length ``|Y|``) or a
    batch of row vectors (returns an ``N x |Y|`` matrix).
    """
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ShapeError(f"features must be 1-D or 2-D, got shape {x.shape}")
    _check_features(W, x)
    return x @ W.T


def _subset_index(subset, n_classes: int) -> np.ndarray:
    idx = np.asarray(subset, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise ValueError("class subset must be nonempty")
    if idx.min() < 0 or idx.max() >= n_classes:
        raise ValueError(f"class subset has indices outside [0, {n_classes})")
    if np.unique(idx).size != idx.size:
        raise ValueError("class subset contains duplicates")
    return idx


def log_softmax(S: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over the last axis with max shifting."""
    S = np.asarray(S, dtype=np.float64)
    shifted = S - S.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    shifted = S - S.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_over(score_vec, subset=None) -> np.ndarray:
    """Softmax of ``score_vec`` restricted to ``subset`` (all classes if None).

    The result is ordered like ``subset``.
    """
    s = np.asarray(score_vec, dtype=np.float64)
    if subset is None:
        if s.shape[-1] == 0:
            raise ValueError("class subset must be nonempty")
        return softmax(s)
    idx = _subset_index(subset, s.shape[-1])
    return softmax(s[..., idx])


def _as_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ShapeError(f"features must be 1-D or 2-D, got shape {X.shape}")
    return X


def _weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size != n:
        raise ShapeError(f"expected {n} sample weights, got {w.size}")
    return w


def selective_ce_batch(W, X, labels, subset=None, weights=None):
    """Weighted mean cross-entropy with the softmax restricted to ``subset``.

    The mean runs over the weight support: ``sum_i w_i * l_i / sum_i w_i``.
    Returns ``(grad, loss)``; gradient rows of classes outside ``subset``
    are exactly zero. A zero total weight gives a zero gradient and loss 0.
    """
    W = np.asarray(W, dtype=np.float64)
    X = _as_batch(X)
    _check_features(W, X)
    n_classes = W.shape[0]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} samples but {labels.size} labels")
    w = _weights(weights, X.shape[0])

    idx = np.arange(n_classes) if subset is None else _subset_index(subset, n_classes)
    pos = np.full(n_classes, -1, dtype=np.int64)
    pos[idx] = np.arange(idx.size)
    target = pos[labels]
    if np.any(target < 0):
        raise ValueError("pseudo label outside the class subset")

    grad = np.zeros_like(W)
    total = w.sum()
    if total == 0:
        return grad, 0.0

    logp = log_softmax(X @ W[idx].T)
    rows = np.arange(X.shape[0])
    losses = -logp[rows, target]
    dS = np.exp(logp)
    dS[rows, target] -= 1.0
    dS *= (w / total)[:, None]
    grad[idx] = dS.T @ X
    return grad, float(np.dot(w, losses) / total)


def selective_ce_grad(W, x, pseudo_label: int, subset):
    """Gradient and loss of ``-log p(x, pseudo_label; subset)`` for one sample."""
    return selective_ce_batch(W, x, [pseudo_label], subset)


def kl_distill_batch(W_cur, W_ema, X, weights=None):
    """Weighted mean of ``KL(p_cur || p_ema)`` over the full label set.

    Only ``W_cur`` receives a gradient; the EMA weights are treated as
    constants. Returns ``(grad, loss)``.
    """
    W_cur = np.asarray(W_cur, dtype=np.float64)
    W_ema = np.asarray(W_ema, dtype=np.float64)
    if W_cur.shape != W_ema.shape:
        raise ShapeError(f"current {W_cur.shape} and EMA {W_ema.shape} weights differ")
    X = _as_batch(X)
    _check_features(W_cur, X)
    w = _weights(weights, X.shape[0])

    grad = np.zeros_like(W_cur)
    total = w.sum()
    if total == 0:
        return grad, 0.0

    logp_raw = log_softmax(X @ W_cur.T)
    p = np.exp(logp_raw)
    logp = np.maximum(logp_raw, _LOG_FLOOR)
    logq = np.maximum(log_softmax(X @ W_ema.T), _LOG_FLOOR)
    ratio = logp - logq
    losses = (p * ratio).sum(axis=1)
    # d kl / d s_k = p_k * (log p_k - log q_k - kl)
    dS = p * (ratio - losses[:, None])
    dS *= (w / total)[:, None]
    grad[:] = dS.T @ X
    return grad, max(float(np.dot(w, losses) / total), 0.0)


def kl_distill_grad(W_cur, W_ema, x):
    """Gradient (w.r.t. ``W_cur`` only) and value of the KL term for one sample."""
    return kl_distill_batch(W_cur, W_ema, x)


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, shape, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if not learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if not epsilon > 0:
            raise ValueError("epsilon must be positive")
        return cls(
            np.zeros(shape), np.zeros(shape), 0, float(learning_rate),
            float(beta1), float(beta2), float(epsilon),
        )


def adam_step(params, grad, state: AdamState, rows=None):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    ``rows`` restricts the update to the listed parameter rows: other rows
    keep their values and their moment estimates untouched (lazy/sparse
    Adam). The step counter always advances by one.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.first_moment.shape:
        raise ShapeError(
            f"params {params.shape}, grad {grad.shape} and moments "
            f"{state.first_moment.shape} must match"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericError("gradient contains non-finite entries")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = state.first_moment.copy()
    v = state.second_moment.copy()
    new = params.copy()
    sel = slice(None) if rows is None else np.asarray(rows, dtype=np.int64)

    g = grad[sel]
    m[sel] = b1 * m[sel] + (1.0 - b1) * g
    v[sel] = b2 * v[sel] + (1.0 - b2) * (g * g)
    m_hat = m[sel] / (1.0 - b1**t)
    v_hat = v[sel] / (1.0 - b2**t)
    new[sel] = new[sel] - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new, replace(state, first_moment=m, second_moment=v, step_count=t)
