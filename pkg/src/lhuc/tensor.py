"""Dense float64 primitives: affine maps, activations and losses.

Matrices are plain 2-D ``numpy.ndarray`` objects in row-major, batch-first
layout (``X`` is ``(batch, inputs)``, weights are ``(units, inputs)``).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "LabelError",
    "as_matrix",
    "affine",
    "activation",
    "sigmoid",
    "softmax",
    "softmax_xent",
    "mse",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not line up."""

    def __init__(self, message: str, *shapes: tuple[int, ...]):
        self.shapes = shapes
        super().__init__(message)


class LabelError(ValueError):
    """Raised when a class index falls outside ``[0, n_classes)``."""


def as_matrix(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {X.shape}", X.shape)
    return X


def affine(W: np.ndarray, b: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Return ``X @ W.T + b``; row ``t`` of the result is ``W x_t + b``."""
    if W.ndim != 2 or X.ndim != 2 or b.ndim != 1:
        raise ShapeError(
            f"affine expects W 2-D, b 1-D, X 2-D; got W{W.shape}, b{b.shape}, X{X.shape}",
            W.shape, b.shape, X.shape,
        )
    if W.shape[1] != X.shape[1]:
        raise ShapeError(
            f"affine: W{W.shape} cannot act on X{X.shape} (W.cols != X.cols)",
            W.shape, X.shape,
        )
    if b.shape[0] != W.shape[0]:
        raise ShapeError(f"affine: bias {b.shape} does not match W{W.shape}", b.shape, W.shape)
    return X @ W.T + b


def sigmoid(Z: np.ndarray) -> np.ndarray:
    # exp(-z) overflows to inf for z < -709, giving exactly 0.0, never NaN
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-Z))


def activation(kind: str, Z: np.ndarray) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(Z)
    if kind == "linear":
        return Z
    raise ValueError(f"unknown activation {kind!r}")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_targets(targets, n_rows: int, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.ndim != 1 or targets.shape[0] != n_rows:
        raise ShapeError(
            f"targets shape {targets.shape} does not match batch of {n_rows}",
            targets.shape, (n_rows,),
        )
    if not np.issubdtype(targets.dtype, np.integer):
        if not np.all(np.mod(targets, 1) == 0):
            raise LabelError("class targets must be integers")
        targets = targets.astype(np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        bad = targets[(targets < 0) | (targets >= n_classes)][0]
        raise LabelError(f"target index {int(bad)} out of range for {n_classes} classes")
    return targets


def softmax_xent(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``softmax(logits)`` against class indices.

    Returns the loss and its gradient with respect to ``logits``.
    """
    n, k = logits.shape
    targets = _check_targets(targets, n, k)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, targets]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, targets] -= 1.0
    grad /= n
    return loss, grad


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred{pred.shape} vs target{target.shape}", pred.shape, target.shape)
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size
