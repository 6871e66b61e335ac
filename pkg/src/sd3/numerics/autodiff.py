"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray plus the closure that routes its output
gradient to its parents.  The op set is deliberately small and fixed: the
arithmetic dunders, ``matmul``, the pointwise maps, reductions, the softmax
pair, ``layer_norm``, ``embedding``, ``gather_last``, shape ops, and the two
gradient-control ops ``stop_grad`` and ``st_round`` (round with a
straight-through gradient).  Everything the models need is composed from
these, which keeps the gradient-check surface finite.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "ParamStore", "constant", "concat", "embedding", "gather_last",
    "layer_norm", "st_round", "stop_grad",
]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff engine ---------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward requires a scalar")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        a, b = self, _as_tensor(other)

        def back(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))

        return Tensor(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _as_tensor(other)

        def back(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))

        return Tensor(a.data - b.data, (a, b), back)

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other):
        a, b = self, _as_tensor(other)

        def back(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return Tensor(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _as_tensor(other)

        def back(g):
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor(a.data / b.data, (a, b), back)

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __neg__(self):
        return self * (-1.0)

    def __matmul__(self, other):
        a, b = self, _as_tensor(other)
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ValueError("matmul operands must be at least 2-d")

        def back(g):
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

        return Tensor(a.data @ b.data, (a, b), back)

    # -- pointwise ---------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def back(g):
            _accum(self, g * out_data)

        return Tensor(out_data, (self,), back)

    def log(self):
        def back(g):
            _accum(self, g / self.data)

        return Tensor(np.log(self.data), (self,), back)

    def tanh(self):
        out_data = np.tanh(self.data)

        def back(g):
            _accum(self, g * (1.0 - out_data * out_data))

        return Tensor(out_data, (self,), back)

    def relu(self):
        mask = self.data > 0.0

        def back(g):
            _accum(self, g * mask)

        return Tensor(np.where(mask, self.data, 0.0), (self,), back)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = np.sum(self.data, axis=axis, keepdims=keepdims)

        def back(g):
            _accum(self, _spread(g, self.data.shape, axis, keepdims))

        return Tensor(out_data, (self,), back)

    def mean(self, axis=None, keepdims=False):
        out_data = np.mean(self.data, axis=axis, keepdims=keepdims)
        count = self.data.size / max(out_data.size, 1)

        def back(g):
            _accum(self, _spread(g, self.data.shape, axis, keepdims) / count)

        return Tensor(out_data, (self,), back)

    # -- categorical -------------------------------------------------------

    def softmax_last(self):
        m = np.max(self.data, axis=-1, keepdims=True)
        e = np.exp(self.data - m)
        s = e / np.sum(e, axis=-1, keepdims=True)

        def back(g):
            dot = np.sum(g * s, axis=-1, keepdims=True)
            _accum(self, s * (g - dot))

        return Tensor(s, (self,), back)

    def log_softmax_last(self):
        m = np.max(self.data, axis=-1, keepdims=True)
        shifted = self.data - m
        lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        s = np.exp(shifted - lse)

        def back(g):
            total = np.sum(g, axis=-1, keepdims=True)
            _accum(self, g - s * total)

        return Tensor(shifted - lse, (self,), back)

    # -- shape -------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def back(g):
            _accum(self, g.reshape(old))

        return Tensor(self.data.reshape(shape), (self,), back)

    def swapaxes(self, a: int, b: int):
        def back(g):
            _accum(self, g.swapaxes(a, b))

        return Tensor(self.data.swapaxes(a, b), (self,), back)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _spread(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back to the pre-reduction shape."""
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) else np.full(shape, g)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def constant(x) -> Tensor:
    return Tensor(x)


def stop_grad(x: Tensor) -> Tensor:
    """Identity with the gradient path severed."""
    return Tensor(x.data)


def st_round(x: Tensor) -> Tensor:
    """Round half away from zero with a straight-through (identity) gradient."""
    rounded = np.sign(x.data) * np.floor(np.abs(x.data) + 0.5)

    def back(g):
        _accum(x, g)

    return Tensor(rounded, (x,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; gradients scatter-add into the table."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    return Tensor(table.data[idx], (table,), back)


def gather_last(x: Tensor, idx) -> Tensor:
    """Pick one entry per row along the last axis (e.g. log-prob of a label)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.data.shape[:-1]:
        raise ValueError("gather index shape must match the leading axes")

    def back(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        _accum(x, buf)

    return Tensor(np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0], (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        _accum(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accum(bias, _unbroadcast(g, bias.data.shape))
        dxhat = g * gain.data
        term = dxhat - np.mean(dxhat, axis=-1, keepdims=True) \
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        _accum(x, inv * term)

    return Tensor(gain.data * xhat + bias.data, (x, gain, bias), back)


def normal_init(rng, scale: float = 0.02):
    """Initializer factory: i.i.d. normal(0, scale^2) from a seeded stream."""
    def init(shape):
        n = 1
        for s in shape:
            n *= s
        return scale * np.array(rng.normals(n)).reshape(shape)
    return init


class ParamStore:
    """Named leaf tensors that persist across training steps.

    ``param`` creates on first call and returns the same ``Tensor`` object
    afterwards, so optimizer state can key on the tensor identity.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, shape: tuple, init) -> Tensor:
        if name in self._params:
            t = self._params[name]
            if t.data.shape != tuple(shape):
                raise ValueError(f"shape mismatch for parameter {name!r}")
            return t
        if callable(init):
            data = np.asarray(init(tuple(shape)), dtype=np.float64)
        else:
            data = np.asarray(init, dtype=np.float64)
        if data.shape != tuple(shape):
            raise ValueError(f"initializer shape mismatch for parameter {name!r}")
        t = Tensor(data)
        self._params[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def names(self) -> list[str]:
        return sorted(self._params)

    def tensors(self) -> list[Tensor]:
        return [self._params[n] for n in self.names()]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: self._params[n].data.copy() for n in self.names()}

    def load_state_dict(self, state: dict):
        missing = set(self._params) - set(state)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        for n, t in self._params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for parameter {n!r}")
            t.data = arr.copy()

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())
