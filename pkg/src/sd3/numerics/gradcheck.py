"""Finite-difference verification of the autodiff tape."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .rng import Rng


def grad_check(loss_fn, params: list[Tensor], eps: float = 1e-4,
               sample: int | None = None, rng: Rng | None = None) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter data on
    every call and return a scalar ``Tensor``.  Returns the worst relative
    error ``|a - n| / max(1, |a|, |n|)`` over the checked scalar coordinates.
    By default every coordinate of every parameter is checked; ``sample``
    caps the count by drawing coordinates without replacement from the
    concatenated coordinate space (deterministic given ``rng``).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not math.isfinite(float(loss.data)):
        raise ValueError("loss not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    coords = [(pi, i) for pi, p in enumerate(params) for i in range(p.data.size)]
    if sample is not None and sample < len(coords):
        r = rng if rng is not None else Rng(0)
        chosen = []
        pool = coords
        for _ in range(sample):
            k = r.randint(len(pool))
            chosen.append(pool[k])
            pool = pool[:k] + pool[k + 1:]
        coords = chosen

    worst = 0.0
    for pi, i in coords:
        flat = params[pi].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(loss_fn().data)
        flat[i] = orig - eps
        lo = float(loss_fn().data)
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError("loss not finite")
        numeric = (hi - lo) / (2.0 * eps)
        ana = float(analytic[pi].reshape(-1)[i])
        err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
        if err > worst:
            worst = err
    return worst
