"""Classification heads over the pooled representation, softmax, and the
label-smoothed cross-entropy objective.

The pooled features (B, C, D) are flattened to (B, C*D) before either head.
The linear head is a single affine map; the MLP head adds one ReLU hidden
layer. Loss reduction is the batch mean, so learning-rate semantics do not
depend on batch size.
"""

from __future__ import annotations

import numpy as np

from .numerics import Param, Rng, ShapeError


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def smooth_targets(labels: np.ndarray, n_classes: int, eps_ls: float) -> np.ndarray:
    """(1 - eps) * one_hot + eps / n_classes; rows sum to one."""
    if not 0.0 <= eps_ls < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {eps_ls}")
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"label out of range: saw {int(labels.min())}..{int(labels.max())} "
            f"for {n_classes} classes"
        )
    out = np.full((labels.shape[0], n_classes), eps_ls / n_classes, dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] += 1.0 - eps_ls
    return out


def smoothed_cross_entropy(
    logits: np.ndarray, labels: np.ndarray, eps_ls: float
) -> tuple[float, np.ndarray]:
    """Batch-mean smoothed cross-entropy and its gradient wrt the logits.

    Log-probabilities come from a shifted log-sum-exp; the gradient is the
    classic (softmax - smoothed_target) / B.
    """
    if logits.ndim != 2:
        raise ShapeError(f"expected (B, n_classes) logits, got {logits.shape}")
    b, n_classes = logits.shape
    targets = smooth_targets(labels, n_classes, eps_ls)
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    loss = float(-np.sum(targets * log_probs) / b)
    grad = (np.exp(log_probs) - targets) / b
    return loss, grad.astype(logits.dtype)


class LinearHead:
    """Single affine map from flattened pooled features to class logits."""

    def __init__(self, in_features: int, n_classes: int, *, dtype=np.float32,
                 rng: Rng | None = None):
        rng = rng or Rng(0)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Param(
            "head.weight",
            rng.child("head.weight").uniform(-bound, bound, (n_classes, in_features), dtype=dtype),
        )
        self.bias = Param("head.bias", np.zeros(n_classes, dtype=dtype))
        self.in_features = in_features
        self.n_classes = n_classes
        self._cache = None

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected (B, {self.in_features}) features, got {x.shape}")
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x = self._cache
        self.weight.grad += (grad_logits.T @ x).astype(self.weight.grad.dtype)
        self.bias.grad += np.sum(grad_logits, axis=0).astype(self.bias.grad.dtype)
        return (grad_logits @ self.weight.value).astype(x.dtype)


class MlpHead:
    """Affine -> ReLU -> affine head with one hidden layer."""

    def __init__(self, in_features: int, hidden: int, n_classes: int, *,
                 dtype=np.float32, rng: Rng | None = None):
        if hidden < 1:
            raise ValueError(f"hidden width must be >= 1, got {hidden}")
        rng = rng or Rng(0)
        b1 = 1.0 / np.sqrt(in_features)
        b2 = 1.0 / np.sqrt(hidden)
        self.hidden_weight = Param(
            "head.hidden_weight",
            rng.child("head.hidden_weight").uniform(-b1, b1, (hidden, in_features), dtype=dtype),
        )
        self.hidden_bias = Param("head.hidden_bias", np.zeros(hidden, dtype=dtype))
        self.out_weight = Param(
            "head.out_weight",
            rng.child("head.out_weight").uniform(-b2, b2, (n_classes, hidden), dtype=dtype),
        )
        self.out_bias = Param("head.out_bias", np.zeros(n_classes, dtype=dtype))
        self.in_features = in_features
        self.hidden = hidden
        self.n_classes = n_classes
        self._cache = None

    def parameters(self) -> list[Param]:
        return [self.hidden_weight, self.hidden_bias, self.out_weight, self.out_bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected (B, {self.in_features}) features, got {x.shape}")
        pre = x @ self.hidden_weight.value.T + self.hidden_bias.value
        act = np.maximum(pre, 0.0)
        self._cache = (x, pre, act)
        return act @ self.out_weight.value.T + self.out_bias.value

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, pre, act = self._cache
        self.out_weight.grad += (grad_logits.T @ act).astype(self.out_weight.grad.dtype)
        self.out_bias.grad += np.sum(grad_logits, axis=0).astype(self.out_bias.grad.dtype)
        d_act = grad_logits @ self.out_weight.value
        d_pre = d_act * (pre > 0)
        self.hidden_weight.grad += (d_pre.T @ x).astype(self.hidden_weight.grad.dtype)
        self.hidden_bias.grad += np.sum(d_pre, axis=0).astype(self.hidden_bias.grad.dtype)
        return (d_pre @ self.hidden_weight.value).astype(x.dtype)
