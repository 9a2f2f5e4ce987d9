"""Loss/gradient kernels and a lazily-updated adaptive-moment optimizer.

Gradients of hashed-feature linear models are nonzero only on the feature
columns present in the batch, so moment updates touch those rows only
(TensorFlow's LazyAdam semantics). This keeps desk-scale training fast even
with a large hash space.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _batch_columns(X: sp.csr_matrix) -> tuple[np.ndarray, np.ndarray]:
    """Dense restriction of a CSR batch to its touched columns.

    Returns (cols, Xc) with Xc of shape (n_rows, len(cols)).
    """
    cols, inv = np.unique(X.indices, return_inverse=True)
    Xc = np.zeros((X.shape[0], len(cols)), dtype=X.dtype)
    row_ids = np.repeat(np.arange(X.shape[0]), np.diff(X.indptr))
    Xc[row_ids, inv] = X.data
    return cols, Xc


def softmax_xent_batch(coef: np.ndarray, X: sp.csr_matrix, y_idx: np.ndarray):
    """Mean cross-entropy and its gradient restricted to touched columns.

    coef has shape (D, K); the returned gradient rows align with ``cols``.
    """
    n = X.shape[0]
    logits = X @ coef
    probs = softmax(logits, axis=1)
    eps = np.finfo(np.float64).tiny
    loss = -float(np.mean(np.log(probs[np.arange(n), y_idx].astype(np.float64) + eps)))
    g = probs
    g[np.arange(n), y_idx] -= 1.0
    g /= n
    cols, Xc = _batch_columns(X)
    grad_cols = Xc.T @ g
    return loss, cols, grad_cols


def softmax_xent_dense(coef: np.ndarray, X: sp.csr_matrix, y_idx: np.ndarray):
    """Full-dimension variant of softmax_xent_batch, for gradient checking."""
    loss, cols, grad_cols = softmax_xent_batch(coef, X, y_idx)
    grad = np.zeros_like(coef, dtype=grad_cols.dtype)
    grad[cols] = grad_cols
    return loss, grad


def logistic_batch(w: np.ndarray, b: float, X: sp.csr_matrix, y: np.ndarray):
    """Mean binary cross-entropy and sparse gradient for a logistic model."""
    n = X.shape[0]
    z = np.asarray(X @ w).ravel() + b
    p = sigmoid(z)
    eps = np.finfo(np.float64).tiny
    loss = -float(np.mean(y * np.log(p + eps) + (1.0 - y) * np.log(1.0 - p + eps)))
    g = (p - y) / n
    cols, Xc = _batch_columns(X)
    grad_cols = Xc.T.astype(np.float64) @ g
    grad_b = float(g.sum())
    return loss, cols, grad_cols, grad_b


def logistic_dense(w: np.ndarray, b: float, X: sp.csr_matrix, y: np.ndarray):
    """Full-dimension variant of logistic_batch, for gradient checking."""
    loss, cols, grad_cols, grad_b = logistic_batch(w, b, X, y)
    grad = np.zeros_like(w, dtype=np.float64)
    grad[cols] = grad_cols
    return loss, grad, grad_b


class LazyAdam:
    """Adam with moment updates restricted to the rows touched by the batch.

    Bias correction uses the global step count; untouched rows keep stale
    moments, which is the standard sparse-Adam trade-off.
    """

    def __init__(self, shape, lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0

    def step(self, param: np.ndarray, rows, grad) -> None:
        """Apply one update to param[rows] given the gradient on those rows."""
        self.t += 1
        g = np.asarray(grad, dtype=param.dtype)
        m = self.beta1 * self.m[rows] + (1.0 - self.beta1) * g
        v = self.beta2 * self.v[rows] + (1.0 - self.beta2) * g * g
        self.m[rows] = m
        self.v[rows] = v
        scale = self.lr * np.sqrt(1.0 - self.beta2**self.t) / (1.0 - self.beta1**self.t)
        param[rows] -= scale * m / (np.sqrt(v) + self.eps)


class ScalarAdam:
    """Plain Adam for a scalar parameter (e.g. a bias term)."""

    def __init__(self, lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = 0.0
        self.v = 0.0
        self.t = 0

    def step(self, value: float, grad: float) -> float:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        scale = self.lr * np.sqrt(1.0 - self.beta2**self.t) / (1.0 - self.beta1**self.t)
        return value - scale * self.m / (np.sqrt(self.v) + self.eps)
