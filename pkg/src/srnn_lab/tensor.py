"""Dense float64 primitives shared by the models.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
Batched inputs are allowed everywhere: the feature axis is always the last one.
"""
from __future__ import annotations

import functools

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def circular_shift(v: np.ndarray, k: int, out: np.ndarray | None = None) -> np.ndarray:
    """Rotate the last axis so that ``result[..., i] == v[..., (i + k) % n]``.

    ``k = 1`` is one application of the fixed shift permutation; negative ``k``
    undoes it. Implemented by slicing, never by a permutation matrix.
    """
    v = np.asarray(v)
    n = v.shape[-1]
    k %= n
    if out is None:
        out = np.empty_like(v)
    if k == 0:
        out[...] = v
    else:
        out[..., : n - k] = v[..., k:]
        out[..., n - k :] = v[..., :k]
    return out


@functools.lru_cache(maxsize=32)
def _rotation_index(T: int, B: int, n: int, start: int, sign: int) -> np.ndarray:
    offset = (sign * (start + np.arange(T))) % n
    cols = (np.arange(n) + offset[:, None]) % n  # (T, n)
    base = (np.arange(T)[:, None] * B + np.arange(B)) * n  # (T, B)
    idx = (base[:, :, None] + cols[:, None, :]).reshape(-1)
    idx.flags.writeable = False
    return idx


def rotate_steps(a: np.ndarray, start: int, sign: int = 1) -> np.ndarray:
    """Shift slice ``a[t]`` by ``sign * (start + t)`` for every t.

    Equivalent to stacking ``circular_shift(a[t], sign * (start + t))``.
    """
    a = np.asarray(a)
    T, n = a.shape[0], a.shape[-1]
    if T == 0 or a[0].size > 256:
        # wide slices: per-step slicing is already copy bound
        out = np.empty_like(a)
        for t in range(T):
            circular_shift(a[t], sign * (start + t), out=out[t])
        return out
    B = a[0].size // n
    return np.take(a.reshape(-1), _rotation_index(T, B, n, start % n, sign)).reshape(a.shape)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) overflows to inf for very negative x, giving the correct limit 0
    x = np.asarray(x, dtype=np.result_type(x, np.float64))
    e = np.negative(x, out=np.empty_like(x))
    with np.errstate(over="ignore"):
        np.exp(e, out=e)
    e += 1.0
    return np.divide(1.0, e, out=e)


def activation(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "identity":
        return np.array(x, copy=True)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, x: np.ndarray) -> np.ndarray:
    """Derivative of ``activation(kind, .)`` at the pre-activation ``x``.

    The relu derivative at exactly 0 is 0.
    """
    if kind == "relu":
        return (x > 0).astype(np.result_type(x, np.float64))
    if kind == "sigmoid":
        s = sigmoid(x)
        return s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if kind == "identity":
        return np.ones_like(x, dtype=np.result_type(x, np.float64))
    raise ValueError(f"unknown activation {kind!r}")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[np.floating, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    ``logits`` is ``(batch, classes)``, ``targets`` integer class ids.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {n}")
    if n and (targets.min() < 0 or targets.max() >= c):
        bad = targets[(targets < 0) | (targets >= c)][0]
        raise ValueError(f"target {bad} out of range [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    # numpy scalar keeps extended precision when logits are longdouble
    loss = -logp[rows, targets].mean()
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad /= n
    return loss, grad
