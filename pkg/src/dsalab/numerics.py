"""Shared float64 primitives: masked softmax, L1 normalization, KL, top-k, and a
central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class NumericsError(ValueError):
    pass


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{name} has non-finite entries")
    return a


def softmax_rows(m, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise softmax. Entries where ``mask`` is False are excluded and come
    out exactly 0."""
    x = np.asarray(m, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != x.shape:
            raise NumericsError(f"mask shape {keep.shape} != input shape {x.shape}")
    empty = ~keep.any(axis=1)
    if empty.any():
        raise NumericsError(f"row {int(np.argmax(empty))} is fully masked")
    z = np.where(keep, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def l1_normalize(v: Sequence[float]) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if np.any(a < 0):
        raise NumericsError("l1_normalize expects nonnegative entries")
    total = a.sum()
    if not total > 0:
        raise NumericsError("l1_normalize of an all-zero vector is undefined")
    return a / total


def kl_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(p || q) in nats with 0 * ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise NumericsError(f"length mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    bad = support & (q <= 0)
    if bad.any():
        raise NumericsError(f"support violation at index {int(np.argmax(bad))}: p>0 but q=0")
    ps, qs = p[support], q[support]
    # the true value is nonnegative; clamp rounding noise from near-equal rows
    return max(0.0, float(np.sum(ps * (np.log(ps) - np.log(qs)))))


def topk_indices(scores: Sequence[float], k: int) -> np.ndarray:
    """Indices of the ``min(k, n)`` largest scores, ties to the smaller index,
    returned sorted ascending."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise NumericsError("topk_indices on empty scores")
    if k < 1:
        raise NumericsError(f"k must be >= 1, got {k}")
    if k >= s.size:
        return np.arange(s.size)
    # stable sort on the negated scores keeps equal scores in index order
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:k])


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    if not eps > 0:
        raise NumericsError("eps must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = f(x.copy())
        x[i] = old - eps
        fm = f(x.copy())
        x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"non-finite function value perturbing coordinate {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return g


def softmax_kl_grad(x, q) -> np.ndarray:
    """Gradient of KL(softmax(x) || q) with respect to x."""
    p = softmax_rows(np.asarray(x, dtype=np.float64))[0]
    q = np.asarray(q, dtype=np.float64)
    a = np.log(p) - np.log(q)
    return p * (a - np.dot(p, a))
