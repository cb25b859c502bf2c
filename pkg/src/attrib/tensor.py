"""Dense float64 kernels.

Tensors are plain ``numpy.ndarray`` objects with dtype float64. Every kernel
accepts optional leading batch dimensions so the same code path serves both
single-example explanation and minibatch training.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtr


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> np.ndarray:
    """Matrix product over the last two axes (leading axes batch)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def add(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    _check_same(a, b, "add")
    return a + b


def softmax_lastdim(x) -> np.ndarray:
    x = as_tensor(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF (no tanh approximation)."""
    x = as_tensor(x)
    return x * ndtr(x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return ndtr(x) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last extent of {x.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def linear(x, w, bias) -> np.ndarray:
    """``x @ w + bias`` with ``w`` laid out as (d_in, d_out)."""
    x = as_tensor(x)
    w = as_tensor(w)
    bias = as_tensor(bias)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or bias.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, bias {bias.shape} do not conform")
    return np.matmul(x, w) + bias
