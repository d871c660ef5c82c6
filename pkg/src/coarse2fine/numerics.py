"""Stable softmax / cross-entropy primitives and a finite-difference checker.

Everything here operates on float64 numpy arrays. The training path may
downcast to float32, but theory verification and all tests run in float64
because the bound checks evaluate exp() of large dot products.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (e.g. near-zero norm)."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax of a 1-D logit vector, with max-subtraction for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("softmax expects a non-empty 1-D vector")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax expects finite logits")
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / np.sum(e)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D logit matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] == 0:
        raise ValueError("softmax_rows expects a non-empty 2-D matrix")
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label], computed in log space."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("cross_entropy expects a non-empty 1-D vector")
    label = int(label)
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} logits")
    shifted = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(shifted))) - shifted[label])


def ce_gradient(logits: np.ndarray, label: int) -> np.ndarray:
    """Gradient of cross_entropy w.r.t. the logits: softmax - onehot."""
    p = softmax(logits)
    label = int(label)
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} out of range for {p.size} logits")
    g = p.copy()
    g[label] -= 1.0
    return g


def l2_normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """v / ||v||. Raises on near-zero norm rather than returning zeros."""
    v = np.asarray(v, dtype=np.float64)
    nrm = float(np.linalg.norm(v))
    if nrm <= eps:
        raise DegenerateInputError(f"cannot normalize vector with norm {nrm}")
    return v / nrm


def l2_normalize_backward(v: np.ndarray, grad_out: np.ndarray,
                          eps: float = 1e-12) -> np.ndarray:
    """VJP of v -> v/||v||: (g - (u.g) u) / ||v|| with u = v/||v||."""
    v = np.asarray(v, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    nrm = float(np.linalg.norm(v))
    if nrm <= eps:
        raise DegenerateInputError(f"cannot normalize vector with norm {nrm}")
    u = v / nrm
    return (grad_out - np.dot(u, grad_out) * u) / nrm


def normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateInputError("row with near-zero norm")
    return x / norms


def normalize_rows_backward(x: np.ndarray, grad_out: np.ndarray,
                            eps: float = 1e-12) -> np.ndarray:
    """Row-wise VJP of x -> x/||x||."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateInputError("row with near-zero norm")
    u = x / norms
    dots = np.sum(u * grad_out, axis=1, keepdims=True)
    return (grad_out - dots * u) / norms


def grad_check(fn: Callable[[np.ndarray], float], point: np.ndarray,
               analytic_grad: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error of analytic_grad vs central finite differences.

    Relative error per coordinate uses max(1, |analytic|, |numeric|) as
    the denominator.
    """
    point = np.asarray(point, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if point.shape != analytic_grad.shape:
        raise ValueError("point and analytic_grad shapes differ")
    worst = 0.0
    flat = point.ravel()
    aflat = analytic_grad.ravel()
    for i in range(flat.size):
        x = flat.copy()
        x[i] = flat[i] + step
        fp = fn(x.reshape(point.shape))
        x[i] = flat[i] - step
        fm = fn(x.reshape(point.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"non-finite evaluation while perturbing coordinate {i}")
        numeric = (fp - fm) / (2.0 * step)
        denom = max(1.0, abs(aflat[i]), abs(numeric))
        worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
