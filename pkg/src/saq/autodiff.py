"""Minimal reverse-mode autodiff on float64 numpy arrays.

Define-by-run: each forward op records a backward closure on the node, and
``backward()`` walks the graph in reverse topological order. Deliberately
small primitive set: dense networks, softmax/log-sum-exp heads and squared
error losses are all this artifact needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "ParameterSet",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "tanh",
    "relu",
    "exp",
    "log",
    "softmax",
    "logsumexp",
    "gather",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "log_softmax",
    "concat",
    "mse",
    "sum_squares",
    "stop_gradient",
    "backward",
    "adam_step",
]


class ShapeError(ValueError):
    pass


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray.

    Leaf tensors (no parents) must be finite; intermediate values are not
    re-checked so overflow in user code surfaces naturally.
    """

    __slots__ = ("data", "parents", "_backward_fn", "grad")

    def __init__(self, data, parents=(), backward_fn=None, _check=True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not parents and not np.all(np.isfinite(arr)):
            raise ValueError("leaf tensor contains NaN/Inf")
        self.data = arr
        self.parents = parents
        self._backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        # Sum gradient over broadcast axes so it matches self.data's shape.
        g = np.asarray(g, dtype=np.float64)
        extra = g.ndim - self.data.ndim
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        for ax, n in enumerate(self.data.shape):
            if n == 1 and g.shape[ax] != 1:
                g = g.sum(axis=ax, keepdims=True)
        self.grad = g if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # Small amount of operator sugar used throughout the package.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, parents=(a, b))

    def bw(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward_fn = bw
    return out


def _broadcast_check(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{opname} shapes do not broadcast: {a.data.shape} vs {b.data.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data, parents=(a, b))

    def bw(g):
        a._accumulate(g)
        b._accumulate(g)

    out._backward_fn = bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data, parents=(a, b))

    def bw(g):
        a._accumulate(g)
        b._accumulate(-g)

    out._backward_fn = bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    out = Tensor(a.data * b.data, parents=(a, b))

    def bw(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    out._backward_fn = bw
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data, parents=(a,))
    out._backward_fn = lambda g: a._accumulate(-g)
    return out


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (cheaper than mul with a constant tensor)."""
    a = _as_tensor(a)
    out = Tensor(a.data * c, parents=(a,))
    out._backward_fn = lambda g: a._accumulate(g * c)
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    out = Tensor(t, parents=(a,))
    out._backward_fn = lambda g: a._accumulate(g * (1.0 - t * t))
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,))
    out._backward_fn = lambda g: a._accumulate(g * (a.data > 0.0))
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    out = Tensor(e, parents=(a,))
    out._backward_fn = lambda g: a._accumulate(g * e)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data), parents=(a,))
    out._backward_fn = lambda g: a._accumulate(g / a.data)
    return out


def softmax(a) -> Tensor:
    """Softmax over the last axis, max-subtracted for overflow safety."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, parents=(a,))

    def bw(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        a._accumulate(p * (g - dot))

    out._backward_fn = bw
    return out


def logsumexp(a) -> Tensor:
    """log sum exp over the last axis, max-subtracted for overflow safety."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    val = (m + np.log(s)).squeeze(-1)
    p = e / s
    out = Tensor(val, parents=(a,))
    out._backward_fn = lambda g: a._accumulate(np.expand_dims(g, -1) * p)
    return out


def gather(a, index) -> Tensor:
    """Pick one entry per row along the last axis. index: int array, shape a.shape[:-1]."""
    a = _as_tensor(a)
    idx = np.asarray(index)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(f"gather index shape {idx.shape} does not match {a.data.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[-1]):
        raise IndexError("gather index out of range")
    val = np.take_along_axis(a.data, idx[..., None], axis=-1).squeeze(-1)
    out = Tensor(val, parents=(a,))

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx[..., None], np.expand_dims(g, -1), axis=-1)
        a._accumulate(full)

    out._backward_fn = bw
    return out


def reduce_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis), parents=(a,))

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    out._backward_fn = bw
    return out


def reduce_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis), parents=(a,))

    def bw(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g / n, a.data.shape))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape))

    out._backward_fn = bw
    return out


def mse(a, b) -> Tensor:
    """Unweighted mean of squared differences (no 1/2 factor)."""
    d = sub(a, b)
    return reduce_mean(mul(d, d))


def sum_squares(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    return reduce_sum(mul(a, a), axis=axis)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), parents=(a,))
    out._backward_fn = lambda g: a._accumulate(g.reshape(a.data.shape))
    return out


def log_softmax(a) -> Tensor:
    """log softmax over the last axis (logits minus log-sum-exp)."""
    a = _as_tensor(a)
    lse = logsumexp(a)
    return sub(a, reshape(lse, lse.data.shape + (1,)))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    out._backward_fn = bw
    return out


def stop_gradient(a) -> Tensor:
    """Identity on values; backward contributes exactly zero upstream."""
    a = _as_tensor(a)
    out = Tensor(a.data, parents=(a,))
    out._backward_fn = lambda g: None
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from a scalar loss."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


@dataclass
class ParameterSet:
    """Named parameters plus adaptive-moment optimizer state."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def names(self):
        return list(self.params.keys())

    def flat_values(self) -> np.ndarray:
        return np.concatenate([self.params[n].data.ravel() for n in sorted(self.params)])

    def copy_values_from(self, other: "ParameterSet"):
        for n, t in other.params.items():
            self.params[n].data = t.data.copy()


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(ps: ParameterSet, lr: float) -> None:
    """One Adam update from the gradients currently on ps; clears them after."""
    ps.step_count += 1
    t = ps.step_count
    bc1 = 1.0 - ADAM_BETA1**t
    bc2 = 1.0 - ADAM_BETA2**t
    for name, p in ps.params.items():
        g = p.grad
        if g is None:
            continue
        m = ps.m[name]
        v = ps.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    ps.zero_grad()
