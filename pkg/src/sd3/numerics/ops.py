"""Stable categorical primitives shared across the package.

All functions take and return float64 numpy arrays; distributions live on the
last axis unless stated otherwise.
"""
from __future__ import annotations

import numpy as np


def logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("empty categorical")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("empty categorical")
    return x - logsumexp(x, axis=axis, keepdims=True)


def kl_categorical(p: np.ndarray, q: np.ndarray, axis: int = -1) -> np.ndarray:
    """KL(p || q) for categorical distributions along ``axis``.

    Uses the 0 * ln 0 = 0 convention.  Any cell with p > 0 and q == 0 makes
    the divergence infinite; that is treated as a caller error.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("shape mismatch")
    if p.shape[axis] == 0:
        raise ValueError("empty categorical")
    support = p > 0.0
    if np.any(support & (q <= 0.0)):
        raise ValueError("absolute continuity violated")
    ratio = np.where(support, p / np.where(support, q, 1.0), 1.0)
    terms = np.where(support, p * np.log(ratio), 0.0)
    return np.sum(terms, axis=axis)


def one_hot(indices: np.ndarray, num_classes: int) -> np.ndarray:
    indices = np.asarray(indices)
    out = np.zeros(indices.shape + (num_classes,), dtype=np.float64)
    np.put_along_axis(out, indices[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def normalize(p: np.ndarray, axis: int = -1) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    s = np.sum(p, axis=axis, keepdims=True)
    if np.any(s <= 0.0):
        raise ValueError("cannot normalize nonpositive mass")
    return p / s
